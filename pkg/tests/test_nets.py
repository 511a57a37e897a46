import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hsfusion import tensor as T
from hsfusion.errors import ShapeError
from hsfusion.nets import (
    CriticNet,
    Dense,
    LinearClassifier,
    NetSizes,
    SelectionMatrix,
    classify,
    critic_scores,
    generate,
    init_params,
    load_bundle,
    save_bundle,
    select_features,
)
from hsfusion.tensor import Tensor

SIZES = NetSizes((6, 5), 3, hidden_dim=4, feature_dim=3, gen_width=7, gen_layers=3, critic_width=5, critic_layers=2)


def test_generate_zero_weights_gives_zero():
    b = init_params(SIZES, 0)
    g = b.generators[0]
    for p in g.params():
        p.data[...] = 0.0
    assert np.array_equal(generate(g, Tensor(np.ones((6, 3)))).data, np.zeros((4, 3)))


def test_generate_batch_independence_and_shape_check():
    b = init_params(SIZES, 1)
    col = np.random.default_rng(0).normal(size=(6, 1))
    one = generate(b.generators[0], Tensor(col)).data
    many = generate(b.generators[0], Tensor(np.repeat(col, 32, axis=1))).data
    assert np.array_equal(one[:, 0], many[:, 0])
    with pytest.raises(ShapeError):
        generate(b.generators[0], Tensor(np.zeros((5, 2))))


def test_generate_is_z_after_m():
    b = init_params(SIZES, 2)
    x = Tensor(np.random.default_rng(1).normal(size=(6, 4)))
    g = b.generators[0]
    assert np.allclose(generate(g, x).data, g.z_matrix.data @ g.body(x).data, rtol=0, atol=1e-14)


def test_generate_golden_checksum():
    b = init_params(NetSizes((8, 8), 2, hidden_dim=4, feature_dim=2, gen_width=6, gen_layers=3), 7)
    x = np.linspace(-1.0, 1.0, 24).reshape(8, 3)
    out = b.hidden(0, x)
    digest = hashlib.sha256(np.ascontiguousarray(out, dtype="<f8").tobytes()).hexdigest()
    assert digest == GOLDEN_GENERATE


GOLDEN_GENERATE = "98ea3b6b44135bd924d922fb9477ac68c217f7320c6f17bfcd139f1a7a809133"


def test_generate_permutes_with_columns():
    b = init_params(SIZES, 3)
    x = np.random.default_rng(2).normal(size=(6, 7))
    perm = np.random.default_rng(3).permutation(7)
    assert np.array_equal(b.hidden(0, x)[:, perm], b.hidden(0, x[:, perm]))


def test_select_features_examples():
    s = SelectionMatrix(Tensor(np.hstack([np.eye(2), np.zeros((2, 2))])))
    h = np.random.default_rng(4).normal(size=(4, 5))
    assert np.array_equal(select_features(s, Tensor(h)).data, h[:2])
    h2 = h.copy()
    h2[3] += 10.0
    assert np.array_equal(select_features(s, Tensor(h2)).data, select_features(s, Tensor(h)).data)


def test_select_features_matches_triple_loop():
    rng = np.random.default_rng(5)
    s, h = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    naive = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                naive[i, j] += s[i, k] * h[k, j]
    assert np.allclose(select_features(SelectionMatrix(Tensor(s)), Tensor(h)).data, naive, rtol=0, atol=1e-13)


def test_select_features_is_linear():
    rng = np.random.default_rng(6)
    s = SelectionMatrix(Tensor(rng.integers(-3, 4, size=(3, 4)).astype(float)))
    h1 = rng.integers(-5, 6, size=(4, 2)).astype(float)
    h2 = rng.integers(-5, 6, size=(4, 2)).astype(float)
    lhs = select_features(s, Tensor(2.0 * h1 - 3.0 * h2)).data
    rhs = 2.0 * select_features(s, Tensor(h1)).data - 3.0 * select_features(s, Tensor(h2)).data
    assert np.array_equal(lhs, rhs)


def test_classify_examples():
    zero = LinearClassifier(Tensor(np.zeros((3, 2))), Tensor(np.zeros(3)))
    assert np.allclose(classify(zero, Tensor(np.ones((2, 4)))).data, 1.0 / 3.0, rtol=0, atol=1e-15)
    eye = LinearClassifier(Tensor(np.eye(3)), Tensor(np.zeros(3)))
    p = classify(eye, Tensor([[1000.0], [1000.0], [1000.0 + np.log(2.0)]])).data[:, 0]
    # 1000 + ln 2 is only stored to half an ulp of 1000 (about 6e-14)
    assert np.allclose(p, [0.25, 0.25, 0.5], rtol=0, atol=1e-13)


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_classify_columns_are_distributions_and_shift_invariant(f, k):
    c = LinearClassifier(Tensor(np.eye(3)), Tensor(np.zeros(3)))
    p = classify(c, Tensor(f)).data
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(p.sum(axis=0), 1.0, rtol=0, atol=1e-12)
    assert np.allclose(classify(c, Tensor(f + k)).data, p, rtol=0, atol=1e-12)


def test_critic_scores_examples():
    trunk = [Dense(Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))]
    dnet = CriticNet(trunk, Dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2))))
    assert np.array_equal(critic_scores(dnet, Tensor(np.ones((4, 1)))).data, np.zeros((2, 1)))
    with pytest.raises(ShapeError):
        critic_scores(dnet, Tensor(np.ones((5, 1))))


def test_clamped_critic_scores_respect_interval_bound():
    b = init_params(SIZES, 8, clamp=0.01)
    h = np.random.default_rng(7).uniform(-3.0, 3.0, size=(4, 50))
    scores = critic_scores(b.critic, Tensor(h)).data
    # |z_out| <= fan_in * c * |z_in|_max + c, layer by layer, relu only shrinks
    bound = np.abs(h).max()
    for fan_in in (4, 5, 5):
        bound = fan_in * 0.01 * bound + 0.01
    assert scores.shape == (2, 50)
    assert np.all(np.isfinite(scores)) and np.abs(scores).max() <= bound


def test_init_params_is_deterministic_and_near_identity():
    a, b = init_params(SIZES, 9), init_params(SIZES, 9)
    for p, q in zip(a.all_params(), b.all_params()):
        assert np.array_equal(p.data, q.data)
    z = [g.z_matrix.data for g in a.generators]
    assert all(np.linalg.norm(zl - np.eye(4)) < 0.1 for zl in z)
    # with Z = I + E, [Z1, Z2] = [E1, E2], whose size is of order |E|^2
    comm = np.linalg.norm(z[0] @ z[1] - z[1] @ z[0])
    assert comm < 1e-3
    assert all(np.abs(p.data).max() <= 0.01 for p in a.critic.params())


def test_inactive_columns_report():
    s = SelectionMatrix(Tensor([[1.0, 5e-5, 0.0], [0.2, -5e-5, 2e-4]]))
    assert s.inactive_columns().tolist() == [1]


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    b = init_params(SIZES, 10)
    b.acc_train = [0.5, 0.25]
    save_bundle(tmp_path / "a.hsfc", b, extra={"k": 1})
    loaded, extra, rest = load_bundle(tmp_path / "a.hsfc")
    assert extra == {"k": 1} and rest == {}
    save_bundle(tmp_path / "b.hsfc", loaded, extra=extra)
    assert (tmp_path / "a.hsfc").read_bytes() == (tmp_path / "b.hsfc").read_bytes()


def test_gradients_reach_every_modality_parameter():
    b = init_params(SIZES, 11)
    x = Tensor(np.random.default_rng(8).normal(size=(6, 4)))
    h = generate(b.generators[0], x)
    loss = T.sum(T.square(classify(b.classifiers[0], select_features(b.selections[0], h))))
    T.backward(loss)
    assert all(np.any(p.grad != 0) for p in b.modality_params(0))
