import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hsfusion import tensor as T
from hsfusion.errors import ContractError
from hsfusion.nets import CriticNet, Dense, NetSizes, SelectionMatrix, init_params
from hsfusion.objective import (
    LossWeights,
    Optimizers,
    TrainState,
    commutation_penalty,
    cross_entropy,
    linf1_norm,
    mean_commutator_norm,
    pairwise_hidden_distance,
    prox_linf,
    prox_linf1_,
    train_epoch,
    wasserstein_value,
)
from hsfusion.tensor import Tensor

SIZES = NetSizes((5, 4, 6), 3, hidden_dim=4, feature_dim=3, gen_width=6, gen_layers=2, critic_width=5, critic_layers=1)


def toy_batches(n=48, seed=0, dims=(5, 4, 6), classes=3):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, n)
    labels = np.eye(classes)[:, y]
    batches = []
    for d in dims:
        proto = rng.normal(size=(d, classes))
        batches.append(SimpleNamespace(x=proto[:, y] + 0.3 * rng.normal(size=(d, n)), labels=labels))
    return batches


def fixed_critic(head_rows):
    """Critic whose score on column b is ``head_rows @ h[:, b]`` (identity trunk on non-negative input)."""
    k, d = np.asarray(head_rows).shape
    trunk = [Dense(Tensor(np.eye(d)), Tensor(np.zeros(d)))]
    return CriticNet(trunk, Dense(Tensor(head_rows), Tensor(np.zeros(k))))


# ---------------------------------------------------------------- wasserstein


def test_wasserstein_hand_example():
    # head 2 reads coordinate 1; head 1 reads coordinate 0
    dnet = fixed_critic([[1.0, 0.0], [0.0, 1.0]])
    h1 = Tensor([[0.0, 0.0], [0.0, 2.0]])
    h2 = Tensor([[0.0, 0.0], [1.0, 3.0]])
    v = wasserstein_value([h1, h2], dnet)
    assert v[0].item() == 1.0
    assert v[1].item() == 0.0


def test_wasserstein_trivial_cases():
    h = Tensor(np.abs(np.random.default_rng(0).normal(size=(2, 5))))
    dnet = fixed_critic(np.random.default_rng(1).normal(size=(3, 2)))
    assert all(v.item() == 0.0 for v in wasserstein_value([h, h, h], dnet))
    zero = fixed_critic(np.zeros((2, 2)))
    other = Tensor(np.random.default_rng(2).normal(size=(2, 5)))
    assert all(v.item() == 0.0 for v in wasserstein_value([h, other], zero))
    with pytest.raises(ContractError):
        wasserstein_value([h], dnet)


def test_wasserstein_matches_loop_oracle():
    rng = np.random.default_rng(3)
    b = init_params(SIZES, 0, clamp=0.5)
    hs = [Tensor(rng.normal(size=(4, 7))) for _ in range(3)]
    values = [v.item() for v in wasserstein_value(hs, b.critic)]

    def score(head, col):
        z = col
        for layer in b.critic.trunk:
            z = np.maximum(layer.w.data @ z + layer.b.data, 0.0)
        return b.critic.head.w.data[head] @ z + b.critic.head.b.data[head]

    for l in range(3):
        expect = 0.0
        for m in range(3):
            if m != l:
                expect += np.mean([score(m, hs[m].data[:, j]) for j in range(7)])
                expect -= np.mean([score(m, hs[l].data[:, j]) for j in range(7)])
        assert values[l] == pytest.approx(expect, rel=1e-12, abs=1e-14)


# ---------------------------------------------------------------- commutation


def test_commutation_examples():
    eye = Tensor(np.eye(3))
    assert commutation_penalty([eye, eye, eye]).item() == 0.0
    d1, d2 = Tensor(np.diag([1.0, 2.0, 3.0])), Tensor(np.diag([-1.0, 0.5, 4.0]))
    assert commutation_penalty([d1, d2]).item() == 0.0
    z1, z2 = Tensor([[0.0, 1.0], [0.0, 0.0]]), Tensor([[0.0, 0.0], [1.0, 0.0]])
    assert np.array_equal((z1 @ z2 - z2 @ z1).data, [[1.0, 0.0], [0.0, -1.0]])
    assert commutation_penalty([z1, z2]).item() == 4.0
    with pytest.raises(ContractError):
        commutation_penalty([Tensor(np.zeros((2, 3)))])


def test_commutation_matches_ordered_double_sum():
    rng = np.random.default_rng(4)
    z = [rng.normal(size=(3, 3)) for _ in range(3)]
    expect = sum(np.sum((z[l] @ z[m] - z[m] @ z[l]) ** 2) for l in range(3) for m in range(3) if m != l)
    assert commutation_penalty([Tensor(a) for a in z]).item() == pytest.approx(expect, rel=1e-13)


@given(hnp.arrays(np.float64, (3, 3, 3), elements=st.floats(-3, 3)))
def test_commutation_is_non_negative(z):
    assert commutation_penalty([Tensor(a) for a in z]).item() >= 0.0


@given(hnp.arrays(np.float64, (3, 3), elements=st.floats(-3, 3)),
       hnp.arrays(np.float64, (3, 3), elements=st.floats(-3, 3)), st.integers(0, 1000))
def test_commuting_family_has_zero_penalty(d1, d2, seed):
    # simultaneously diagonalizable: Q diag Q^-1 with a shared well-conditioned Q
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
    z = [q @ np.diag(np.diag(d)) @ q.T for d in (d1, d2)]
    assert commutation_penalty([Tensor(a) for a in z]).item() <= 1e-24


# ---------------------------------------------------------------- selection norm and prox


def test_linf1_examples():
    assert linf1_norm(SelectionMatrix(Tensor(np.eye(4)))).item() == 4.0
    assert linf1_norm(SelectionMatrix(Tensor(np.zeros((2, 3))))).item() == 0.0
    assert linf1_norm(SelectionMatrix(Tensor([[1.0, -3.0], [2.0, 1.0]]))).item() == 5.0


def test_linf1_subgradient_goes_to_first_maximal_row():
    s = Tensor([[2.0, 1.0], [-2.0, -4.0]], requires_grad=True)
    T.backward(linf1_norm(s))
    assert np.array_equal(s.grad, [[1.0, 0.0], [0.0, -1.0]])


def _prox_oracle(v, t):
    # minimize t*max|u| + 0.5|u - v|^2 over the cap c = max|u|: u = clip(v, -c, c)
    cs = np.concatenate([[0.0], np.abs(v)])
    best = None
    for c in np.linspace(0.0, np.abs(v).max(), 20001).tolist() + cs.tolist():
        u = np.clip(v, -c, c)
        val = t * c + 0.5 * np.sum((u - v) ** 2)
        if best is None or val < best[0]:
            best = (val, u)
    return best[1]


def test_prox_linf_matches_scan_oracle():
    rng = np.random.default_rng(5)
    for _ in range(30):
        v = rng.normal(size=5)
        t = float(rng.uniform(0.0, 3.0))
        got = prox_linf(v, t)
        val = t * np.abs(got).max() + 0.5 * np.sum((got - v) ** 2)
        oracle = _prox_oracle(v, t)
        oval = t * np.abs(oracle).max() + 0.5 * np.sum((oracle - v) ** 2)
        assert val <= oval + 1e-12


def test_prox_linf_edge_cases():
    v = np.array([0.3, -0.2])
    assert np.array_equal(prox_linf(v, 0.0), v)
    assert np.array_equal(prox_linf(v, 0.5), np.zeros(2))
    s = Tensor([[0.3, 5.0], [-0.2, 1.0]])
    prox_linf1_(s, 0.5)
    assert np.array_equal(s.data[:, 0], [0.0, 0.0])
    assert np.allclose(s.data[:, 1], [4.5, 1.0], rtol=0, atol=1e-15)


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_examples():
    y = np.array([[1.0], [0.0], [0.0]])
    assert cross_entropy(Tensor(y.copy()), y).item() == 0.0
    u = Tensor(np.full((3, 1), 1.0 / 3.0))
    assert cross_entropy(u, y).item() == pytest.approx(np.log(3.0), rel=1e-15)
    y2 = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    assert cross_entropy(Tensor(np.full((3, 2), 1.0 / 3.0)), y2).item() == pytest.approx(2 * np.log(3.0), rel=1e-15)
    with pytest.raises(ContractError):
        cross_entropy(u, np.array([[0.5], [0.5], [0.0]]))


def test_cross_entropy_log_floor():
    y = np.array([[1.0], [0.0]])
    assert cross_entropy(Tensor([[0.0], [1.0]]), y).item() == pytest.approx(-np.log(1e-12), rel=1e-15)


# ---------------------------------------------------------------- pairwise distance


def test_pairwise_distance_examples():
    h = np.random.default_rng(6).normal(size=(3, 4))
    assert np.array_equal(pairwise_hidden_distance([h, h, h]), np.zeros(3))
    assert np.allclose(pairwise_hidden_distance([h + 1.0, h]), np.full(3, 2.0), rtol=0, atol=1e-13)


def test_pairwise_distance_matches_double_loop_and_is_symmetric():
    rng = np.random.default_rng(7)
    hs = [rng.normal(size=(4, 6)) for _ in range(3)]
    expect = np.zeros(4)
    for l, m in itertools.product(range(3), range(3)):
        expect += np.mean((hs[l] - hs[m]) ** 2, axis=1)
    assert np.allclose(pairwise_hidden_distance(hs), expect, rtol=1e-12, atol=1e-12)
    for perm in itertools.permutations(range(3)):
        assert np.allclose(pairwise_hidden_distance([hs[p] for p in perm]), expect, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- training


def test_all_zero_weights_and_rates_leave_parameters_unchanged():
    b = init_params(SIZES, 1)
    before = [p.data.copy() for p in b.all_params()]
    w = LossWeights(gamma1=0.0, gamma2=0.0, gamma3=0.0, mu_g=0.0, mu_d=0.0)
    train_epoch(b, toy_batches(), w, TrainState(), batch_size=16)
    for p, q in zip(b.all_params(), before):
        assert np.array_equal(p.data, q)


def test_misaligned_batches_are_rejected():
    b = init_params(SIZES, 2)
    batches = toy_batches()
    batches[1] = SimpleNamespace(x=batches[1].x[:, :-1], labels=batches[1].labels[:, :-1])
    with pytest.raises(ContractError):
        train_epoch(b, batches, LossWeights(), TrainState())


def test_commutation_only_training_shrinks_commutators():
    b = init_params(SIZES, 3)
    # spread the operators away from the identity so there is something to remove
    rng = np.random.default_rng(8)
    for g in b.generators:
        g.z_matrix.data[...] = np.eye(4) + 0.3 * rng.normal(size=(4, 4))
    w = LossWeights(gamma1=0.0, gamma2=1.0, gamma3=0.0, mu_g=5e-3, mu_d=0.0)
    batches = toy_batches(n=16)
    norms = [mean_commutator_norm(b)]
    for _ in range(50):
        train_epoch(b, batches, w, TrainState(), batch_size=16)
        norms.append(mean_commutator_norm(b))
    assert all(b2 < a for a, b2 in zip(norms, norms[1:]))


def test_critic_stays_in_clamp_box_and_history_grows():
    b = init_params(SIZES, 4)
    state = TrainState()
    w = LossWeights(mu_g=1e-2, mu_d=1e-1)
    for epoch in range(3):
        train_epoch(b, toy_batches(), w, state, batch_size=16)
        assert all(np.abs(p.data).max() <= w.clamp_box for p in b.critic.params())
    assert state.epoch == 3 and len(state.commutation) == 3 and len(state.acc[0]) == 3


def test_trivial_solution_hazard_without_classification_term():
    b = init_params(SIZES, 5)
    w = LossWeights(gamma1=5.0, gamma2=0.0, gamma3=0.0, mu_g=1e-2)
    start = [np.abs(s.s.data).sum() for s in b.selections]
    train_epoch(b, toy_batches(), w, TrainState(), batch_size=16)
    end = [np.abs(s.s.data).sum() for s in b.selections]
    assert all(e < s0 for e, s0 in zip(end, start))


def test_classification_term_raises_accuracy():
    b = init_params(SIZES, 6)
    state = TrainState()
    w = LossWeights(mu_g=1e-2)
    opt = Optimizers(3, w)
    for _ in range(10):
        train_epoch(b, toy_batches(), w, state, batch_size=16, opt=opt)
    assert all(state.acc[-1][l] > state.acc[0][l] for l in range(3))
    assert all(a > 0.9 for a in state.acc[-1])


def test_subgradient_and_prox_steps_both_shrink_linf1():
    for step in ("prox", "subgradient"):
        b = init_params(SIZES, 7)
        w = LossWeights(gamma1=2.0, gamma2=0.0, gamma3=0.0, mu_g=1e-2)
        start = sum(linf1_norm(s).item() for s in b.selections)
        train_epoch(b, toy_batches(), w, TrainState(), batch_size=16, selection_step=step)
        assert sum(linf1_norm(s).item() for s in b.selections) < start
