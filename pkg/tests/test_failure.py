import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hsfusion.errors import ContractError
from hsfusion.failure import (
    ThresholdEntry,
    ThresholdTable,
    adaptive_doc,
    build_tree,
    damage_probabilities,
    damage_probability,
    estimate_snr_db,
    reconstruct_features,
    track_cross_sensor,
    vote_quota,
    youden_threshold,
)
from hsfusion.nets import SelectionMatrix
from hsfusion.simdata import SensorBatch, inject_noise
from hsfusion.tensor import Tensor
from tests.oracles import naive_agglomerative, naive_damage_probability

# ---------------------------------------------------------------- clustering tree


def test_build_tree_examples():
    assert np.array_equal(build_tree(np.array([[0.0, 1.0]]), "single").distances, [1.0])
    assert np.allclose(build_tree(np.array([[0.0, 1.0, 10.0]]), "single").distances, [1.0, 9.0], rtol=0, atol=1e-15)
    assert build_tree(np.array([[2.0, 2.0, 5.0], [1.0, 1.0, 0.0]]), "average").distances[0] == 0.0
    with pytest.raises(ContractError):
        build_tree(np.zeros((3, 1)))


@pytest.mark.parametrize("linkage", ["single", "average"])
def test_build_tree_matches_naive_agglomeration(linkage):
    rng = np.random.default_rng(0)
    for _ in range(10):
        pts = rng.normal(size=(12, 3))
        heights, _ = naive_agglomerative(pts, linkage)
        tree = build_tree(pts.T, linkage)
        assert np.allclose(tree.distances, heights, rtol=1e-12, atol=1e-12)
        assert np.all(np.diff(tree.distances) >= 0)


@pytest.mark.parametrize("linkage", ["single", "average"])
def test_damage_probability_matches_naive_rule(linkage):
    rng = np.random.default_rng(1)
    for _ in range(5):
        pts = rng.normal(size=(10, 2))
        heights, parts = naive_agglomerative(pts, linkage)
        tree = build_tree(pts.T, linkage)
        queries = rng.normal(scale=1.5, size=(20, 2))
        got = damage_probabilities(tree, queries.T)
        expect = [naive_damage_probability(pts, heights, parts, q, linkage) for q in queries]
        assert np.allclose(got, expect, rtol=0, atol=1e-12)


def test_damage_probability_examples():
    tree = build_tree(np.array([[0.0, 1.0, 10.0]]), "single")
    assert damage_probability(tree, np.array([2.5])) == 1.0
    assert damage_probability(tree, np.array([1.0])) == pytest.approx(1.0 / 9.0, abs=1e-15)
    assert damage_probability(tree, np.array([100.0])) == 1.0
    avg = build_tree(np.random.default_rng(2).normal(size=(3, 40)), "average")
    assert damage_probability(avg, np.full(3, 1e3)) == 1.0
    assert damage_probability(avg, avg.points[0]) < 0.2


@given(st.integers(0, 10_000))
def test_single_linkage_damage_is_monotone_in_gap(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(2, 15))
    tree = build_tree(pts, "single")
    qa, qb = rng.normal(scale=3.0, size=(2, 2))
    ga, gb = (np.min(np.linalg.norm(pts.T - q, axis=1)) for q in (qa, qb))
    pa, pb = damage_probability(tree, qa), damage_probability(tree, qb)
    assert (pa <= pb) if ga <= gb else (pb <= pa)


def test_tree_subsamples_large_inputs():
    tree = build_tree(np.random.default_rng(3).normal(size=(2, 60)), max_points=25, seed=4)
    assert tree.points.shape == (25, 2) and tree.n_levels == 24


# ---------------------------------------------------------------- tracking


def test_vote_quota():
    assert [vote_quota(n) for n in (2, 3, 4, 5)] == [0.0, 1.0, 1.0, 2.0]


def test_tracking_examples():
    h = np.array([1.0, 2.0])
    a = track_cross_sensor([h, h, h], threshold=1.0)
    assert a.status == "ok" and not a.damaged.any()

    displaced = h + np.array([np.sqrt(10.0), 0.0])
    a = track_cross_sensor([displaced, h, h + 0.01], threshold=1.0)
    assert a.status == "damaged" and a.damaged.tolist() == [True, False, False]

    a = track_cross_sensor([np.zeros(2), np.array([10.0, 0.0]), np.array([0.0, 10.0])], threshold=1.0)
    assert a.status == "inconsistent" and not a.damaged.any()

    a = track_cross_sensor([h, h + 5.0], threshold=1.0)
    assert a.status == "indeterminate" and not a.damaged.any()


@given(st.integers(0, 10_000), st.sampled_from([3, 4, 5]))
def test_tracking_is_permutation_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    hs = [rng.normal(size=3) for _ in range(n)]
    hs[0] = hs[0] + rng.uniform(0, 6)
    thr = float(rng.uniform(0.5, 8.0))
    base = track_cross_sensor(hs, thr)
    perm = rng.permutation(n)
    moved = track_cross_sensor([hs[p] for p in perm], thr)
    assert np.array_equal(moved.damaged, base.damaged[perm])
    assert moved.status == base.status


# ---------------------------------------------------------------- thresholds and DoC


def test_youden_examples():
    t, j, tpr, fpr, low = youden_threshold(np.array([0.1, 0.2, 0.3]), np.array([0.7, 0.8]))
    assert 0.3 <= t < 0.7 and (j, tpr, fpr, low) == (1.0, 1.0, 0.0, False)
    scores = np.array([0.2, 0.4, 0.6])
    t, j, _, _, low = youden_threshold(scores, scores.copy())
    assert j == 0.0 and low and t == pytest.approx(0.4)


def test_youden_matches_exhaustive_threshold_scan():
    rng = np.random.default_rng(5)
    for _ in range(20):
        clean, damaged = rng.beta(2, 5, 40), rng.beta(5, 2, 30)
        t, j, tpr, fpr, _ = youden_threshold(clean, damaged)
        scan = [np.mean(damaged > c) - np.mean(clean > c) for c in np.concatenate([clean, damaged, [-1.0]])]
        assert j == pytest.approx(max(scan), abs=1e-12)
        assert (tpr, fpr) == (np.mean(damaged > t), np.mean(clean > t))


def test_threshold_lookup_uses_nearest_grid_point():
    table = ThresholdTable([ThresholdEntry(s, t, 0.5, 0.5, 0.1, False) for s, t in ((20.0, 0.1), (0.0, 0.3))])
    assert table.lookup(np.array([25.0, 11.0, 9.0, -5.0])).tolist() == [0.1, 0.1, 0.3, 0.3]


def test_adaptive_doc_examples():
    assert adaptive_doc(0.0, 0.87) == 0.87
    assert adaptive_doc(1.0, 0.87) == 0.0
    assert adaptive_doc(0.3, 0.9) == pytest.approx(0.63, abs=1e-15)
    with pytest.raises(ContractError):
        adaptive_doc(1.2, 0.5)


def test_snr_estimate_tracks_injected_noise():
    t = np.linspace(0, 1, 64)[:, None]
    clean = np.sin(2 * np.pi * 2 * t + np.arange(200)[None, :] * 0.01)
    b = SensorBatch(clean, np.eye(2)[:, np.zeros(200, dtype=int)], np.zeros((1, 200)))
    for snr in (20.0, 10.0, 0.0):
        noisy = inject_noise(b, snr, np.random.default_rng(6)).x
        assert np.median(estimate_snr_db(noisy)) == pytest.approx(snr, abs=2.0)


# ---------------------------------------------------------------- reconstruction


def test_reconstruct_examples():
    s = SelectionMatrix(Tensor(np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])))
    h = np.array([0.5, -1.0])
    assert np.array_equal(reconstruct_features(s, [(h, 0.7)]), s.s.data @ h)
    assert np.allclose(reconstruct_features(s, [(h, 0.5), (h, 0.5)]), s.s.data @ h, rtol=0, atol=1e-15)
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert np.allclose(reconstruct_features(s, [(e1, 0.9), (e2, 0.1)]), s.s.data @ np.array([0.9, 0.1]),
                       rtol=0, atol=1e-15)
    assert reconstruct_features(s, [(h, 0.0)]) is None
    assert reconstruct_features(s, []) is None


@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_reconstruct_is_linear_and_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    s = SelectionMatrix(Tensor(rng.normal(size=(2, 3))))
    h = [rng.normal(size=3) for _ in range(3)]
    w = rng.uniform(0.1, 1.0, 3)
    base = reconstruct_features(s, list(zip(h, w)))
    scaled = reconstruct_features(s, list(zip(h, w * k)))
    assert np.allclose(base, scaled, rtol=1e-10, atol=1e-12)
    h2 = [x + y for x, y in zip(h, [rng.normal(size=3) for _ in range(3)])]
    extra = [y - x for x, y in zip(h, h2)]
    lhs = reconstruct_features(s, list(zip(h2, w)))
    rhs = base + reconstruct_features(s, list(zip(extra, w)))
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- calibrated detector on the benchmark


def test_calibrated_detector_on_benchmark(benchmark_run):
    det = benchmark_run["detector"]
    zero = [e for e in det.table.entries if e.snr_db == 0.0][0]
    assert zero.youden_j >= 0.8 and zero.rule == "youden"
    # functional sensors on clean held-out data stay below the operating point
    test = benchmark_run["splits"]["test"]
    bundle = benchmark_run["bundle"]
    for l, b in enumerate(test):
        p = damage_probabilities(det.tree, bundle.hidden(l, b.x))
        assert p.mean() < det.table.lookup(estimate_snr_db(b.x)).mean()
    assert det.track_threshold > 0 and det.track_fpr <= 0.06


def test_tracking_calibration_pairs_cover_all_sensors(benchmark_run):
    det = benchmark_run["detector"]
    test = benchmark_run["splits"]["test"]
    bundle = benchmark_run["bundle"]
    hs = [bundle.hidden(l, b.x[:, :50]) for l, b in enumerate(test)]
    verdicts = det.track(hs)
    assert len(verdicts) == 50
    assert np.mean([v.status == "ok" for v in verdicts]) > 0.8
    assert all(len(v.damaged) == 3 and v.detector == "tracking" for v in verdicts)
