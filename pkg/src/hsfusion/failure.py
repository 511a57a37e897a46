"""Damaged-sensor detection from hidden-space estimates.

Two detectors:

* cross-sensor tracking: at test time a sensor whose hidden estimate is far
  from the others, while the others agree among themselves, is damaged;
* agglomerative clustering: the hidden estimates of clean training data are
  merged bottom-up, and a test estimate's damage probability is the merge
  distance at which it would first join the tree, relative to the root
  merge distance.

Thresholds for the clustering detector are picked per noise level by
maximizing Youden's J on held-out training samples, and looked up at test
time from a signal-only SNR estimate.  The tracking threshold is a fixed
quantile of squared distances between clean sensor pairs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import linkage as scipy_linkage

from .errors import ContractError
from .nets import ModelBundle, SelectionMatrix
from .simdata import SensorBatch, inject_noise

MAX_TREE_POINTS = 5000


# ---------------------------------------------------------------- clustering tree


@dataclass
class ClusterTree:
    points: np.ndarray  # n x d, the clustered hidden estimates
    merges: np.ndarray  # (n-1) x 4 scipy linkage matrix: child, child, distance, size
    linkage: str
    centroids: np.ndarray = field(repr=False)  # (2n-1) x d, leaves then merged nodes
    birth: np.ndarray = field(repr=False)  # first level at which each node exists
    death: np.ndarray = field(repr=False)  # first level at which it no longer exists

    @property
    def distances(self) -> np.ndarray:
        """Cut-off distance ``d_v`` of levels ``v = 1..V``."""
        return self.merges[:, 2]

    @property
    def n_levels(self) -> int:
        return self.merges.shape[0]


def build_tree(h_train: np.ndarray, linkage: str = "average", max_points: int = MAX_TREE_POINTS,
               seed: int = 0) -> ClusterTree:
    """Agglomerative merge history of the columns of ``h_train`` (Euclidean point metric).

    With more than ``max_points`` columns a uniform subsample of that size is clustered.
    """
    if linkage not in ("single", "average"):
        raise ContractError(f"unsupported linkage {linkage!r}")
    pts = np.asarray(h_train, dtype=float).T
    if pts.shape[0] < 2:
        raise ContractError("clustering needs at least 2 points")
    if pts.shape[0] > max_points:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 5000])))
        pts = pts[np.sort(rng.choice(pts.shape[0], max_points, replace=False))]
    merges = scipy_linkage(pts, method=linkage, metric="euclidean")
    merges[:, 2] = np.maximum.accumulate(merges[:, 2])  # float jitter only; these linkages have no inversions
    n = pts.shape[0]
    centroids = np.empty((2 * n - 1, pts.shape[1]))
    centroids[:n] = pts
    birth = np.zeros(2 * n - 1, dtype=int)
    death = np.full(2 * n - 1, n, dtype=int)  # root survives through the last level V = n-1
    counts = np.ones(2 * n - 1)
    for v, (a, b, _, size) in enumerate(merges):
        a, b, node = int(a), int(b), n + v
        centroids[node] = (counts[a] * centroids[a] + counts[b] * centroids[b]) / size
        counts[node] = size
        birth[node] = v + 1
        death[a] = death[b] = v + 1
    return ClusterTree(pts, merges, linkage, centroids, birth, death)


def _join_levels(tree: ClusterTree, queries: np.ndarray) -> np.ndarray:
    """Smallest level whose cut-off reaches the query's join distance; ``V + 1`` if none."""
    d = tree.distances
    v_max = tree.n_levels
    n = tree.points.shape[0]
    out = np.empty(queries.shape[0], dtype=int)
    for start in range(0, queries.shape[0], 256):
        q = queries[start : start + 256]
        if tree.linkage == "single":
            gap = _pairwise(q, tree.points).min(axis=1)
            out[start : start + 256] = np.searchsorted(d, gap, side="left") + 1
            continue
        gap = _pairwise(q, tree.centroids)  # q x nodes
        first = np.searchsorted(d, gap.ravel(), side="left").reshape(gap.shape) + 1
        level = np.maximum(first, np.maximum(tree.birth, 1))
        level = np.where(level < tree.death, level, v_max + 1)
        out[start : start + 256] = level.min(axis=1)
    return np.minimum(out, v_max + 1)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def damage_probabilities(tree: ClusterTree, h: np.ndarray) -> np.ndarray:
    """``d_lev / max_v d_v`` for each column of ``h``, clipped to [0, 1].

    ``lev`` is the first level whose cut-off distance is at least the distance
    from the query to the nearest training point (single linkage) or to the
    nearest centroid of a cluster alive at that level (average linkage).
    """
    queries = np.asarray(h, dtype=float)
    queries = queries[:, None] if queries.ndim == 1 else queries
    d = tree.distances
    d_max = d[-1]
    lev = _join_levels(tree, queries.T)
    if d_max <= 0:
        gap = _pairwise(queries.T, tree.points).min(axis=1)
        return np.where(gap > 0, 1.0, 0.0)
    p = np.where(lev > tree.n_levels, 1.0, d[np.minimum(lev, tree.n_levels) - 1] / d_max)
    return np.clip(p, 0.0, 1.0)


def damage_probability(tree: ClusterTree, h_t: np.ndarray) -> float:
    return float(damage_probabilities(tree, np.asarray(h_t, dtype=float).reshape(-1, 1))[0])


# ---------------------------------------------------------------- assessments


@dataclass
class DamageAssessment:
    p_d: np.ndarray  # per modality; NaN for the tracking detector
    damaged: np.ndarray  # per modality
    threshold: np.ndarray  # per modality
    detector: str
    status: str = "ok"  # ok | damaged | inconsistent | indeterminate
    evidence: dict = field(default_factory=dict)


def vote_quota(n_sensors: int) -> float:
    return (n_sensors - 1) / 2 if n_sensors % 2 else n_sensors / 2 - 1


def track_cross_sensor(h_t: Sequence[np.ndarray], threshold: float) -> DamageAssessment:
    """Majority-vote tracking over squared distances between per-sensor hidden estimates.

    Sensor ``m`` is damaged when at least ``quota`` other sensors sit farther
    than ``threshold`` from it and at least ``quota`` unordered pairs of the
    remaining sensors sit closer than ``threshold`` to each other.  More
    flags than the detectable bound, or far votes without any consistent
    survivor group, give status ``inconsistent``; two sensors give
    ``indeterminate``.
    """
    n = len(h_t)
    hs = np.stack([np.asarray(h, dtype=float).ravel() for h in h_t])
    d2 = ((hs[:, None, :] - hs[None, :, :]) ** 2).sum(-1)
    thr = np.full(n, float(threshold))
    if n < 3:
        return DamageAssessment(np.full(n, np.nan), np.zeros(n, dtype=bool), thr, "tracking",
                                "indeterminate", {"sq_dist": d2})
    quota = vote_quota(n)
    far = np.array([sum(d2[m, l] > threshold for l in range(n) if l != m) for m in range(n)])
    near = np.array([
        sum(d2[j, l] < threshold for j, l in itertools.combinations([k for k in range(n) if k != m], 2))
        for m in range(n)
    ])
    damaged = (far >= quota) & (near >= quota)
    if damaged.sum() > quota or (not damaged.any() and np.any(far >= quota) and quota > 0):
        status = "inconsistent"
    else:
        status = "damaged" if damaged.any() else "ok"
    return DamageAssessment(np.full(n, np.nan), damaged, thr, "tracking", status,
                            {"far_votes": far, "near_votes": near, "sq_dist": d2})


def adaptive_doc(p_d: float, acc_train: float) -> float:
    """Degree of confidence ``(1 - p_D) * Acc_train``."""
    if not (0.0 <= p_d <= 1.0 and 0.0 <= acc_train <= 1.0):
        raise ContractError(f"p_D and accuracy must lie in [0, 1], got {p_d}, {acc_train}")
    return (1.0 - p_d) * acc_train


def reconstruct_features(s_l: SelectionMatrix, survivors: Sequence[tuple[np.ndarray, float]]) -> np.ndarray | None:
    """Features for a damaged sensor from the DoC-weighted mean of surviving hidden estimates.

    Returns ``None`` when there is nothing to reconstruct from (no survivors or zero total DoC).
    """
    if not survivors:
        return None
    w = np.array([float(doc) for _, doc in survivors])
    if w.sum() <= 0:
        return None
    h = np.stack([np.asarray(h, dtype=float).ravel() for h, _ in survivors])
    mean = (w[:, None] * h).sum(axis=0) / w.sum()
    return s_l.s.data @ mean


# ---------------------------------------------------------------- thresholds


def estimate_snr_db(x: np.ndarray, window: int = 5) -> np.ndarray:
    """Per-column SNR from the signal alone.

    Noise power is the residual power after a centered moving-average
    detrend (corrected for the window's own share of white noise); signal
    power is what is left of the total.
    """
    x = np.asarray(x, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    kernel = np.ones(window) / window
    smooth = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, x)
    half = window // 2
    resid = x[half : half + smooth.shape[0]] - smooth
    noise = np.mean(resid**2, axis=0) / (1.0 - 1.0 / window)
    total = np.mean(x**2, axis=0)
    signal = np.maximum(total - noise, 1e-12 * np.maximum(total, 1e-300))
    return 10.0 * np.log10(signal / np.maximum(noise, 1e-300))


@dataclass
class ThresholdEntry:
    snr_db: float
    threshold: float
    youden_j: float
    tpr: float
    fpr: float
    low_confidence: bool
    rule: str = "youden"  # youden | clean_quantile


def youden_threshold(clean: np.ndarray, damaged: np.ndarray) -> tuple[float, float, float, float, bool]:
    """Threshold ``T`` (damaged iff score > T) maximizing TPR - FPR.

    Returns ``(T, J, TPR, FPR, low_confidence)``; among equally good
    thresholds the middle of the best run is used.  Indistinguishable
    distributions give ``J = 0``, the midpoint of the score range, and the
    low-confidence flag.
    """
    clean, damaged = np.asarray(clean, dtype=float), np.asarray(damaged, dtype=float)
    if clean.size == 0 or damaged.size == 0:
        raise ContractError("both score sets must be non-empty")
    u = np.unique(np.concatenate([clean, damaged]))
    cands = np.concatenate([[u[0] - 1e-9], 0.5 * (u[:-1] + u[1:]), [u[-1]]])
    cs, ds = np.sort(clean), np.sort(damaged)
    fpr = (cs.size - np.searchsorted(cs, cands, side="right")) / cs.size
    tpr = (ds.size - np.searchsorted(ds, cands, side="right")) / ds.size
    j = tpr - fpr
    best = j.max()
    if best <= 1e-12:
        t = 0.5 * (u[0] + u[-1])
        return float(t), 0.0, float(np.mean(damaged > t)), float(np.mean(clean > t)), True
    hits = np.flatnonzero(j >= best - 1e-12)
    k = hits[len(hits) // 2]
    return float(cands[k]), float(j[k]), float(tpr[k]), float(fpr[k]), False


@dataclass
class ThresholdTable:
    entries: list[ThresholdEntry]

    def lookup(self, snr_est: float | np.ndarray) -> np.ndarray:
        """Threshold of the grid SNR nearest to each estimate."""
        grid = np.array([e.snr_db for e in self.entries])
        thr = np.array([e.threshold for e in self.entries])
        est = np.atleast_1d(np.asarray(snr_est, dtype=float))
        return thr[np.argmin(np.abs(est[:, None] - grid[None, :]), axis=1)]


@dataclass
class DamageDetector:
    """Clustering tree plus calibrated thresholds, as used at test time."""

    tree: ClusterTree
    table: ThresholdTable
    track_threshold: float | None = None
    track_fpr: float = float("nan")  # share of clean sensor pairs farther apart than the threshold

    def assess(self, h_by_modality: Sequence[np.ndarray], x_by_modality: Sequence[np.ndarray]) -> list[DamageAssessment]:
        """Clustering verdicts for a batch; one assessment per sample."""
        n = len(h_by_modality)
        p = np.stack([damage_probabilities(self.tree, h) for h in h_by_modality])  # L x B
        thr = np.stack([self.table.lookup(estimate_snr_db(x)) for x in x_by_modality])
        flags = p > thr
        return [DamageAssessment(p[:, k], flags[:, k], thr[:, k], "clustering",
                                 "damaged" if flags[:, k].any() else "ok") for k in range(p.shape[1])]

    def track(self, h_by_modality: Sequence[np.ndarray]) -> list[DamageAssessment]:
        """Cross-sensor tracking verdicts for a batch; one assessment per sample."""
        if self.track_threshold is None:
            raise ContractError("no tracking threshold calibrated")
        b = h_by_modality[0].shape[1]
        return [track_cross_sensor([h[:, k] for h in h_by_modality], self.track_threshold) for k in range(b)]


def _split_fit_calibration(n: int, fit_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 4242])))
    order = rng.permutation(n)
    k = int(round(fit_fraction * n))
    return np.sort(order[:k]), np.sort(order[k:])


def _table(p_clean: np.ndarray, positives: Sequence[np.ndarray], snr_grid: Sequence[float], clean_snr: float,
           quantile: float, min_j: float) -> ThresholdTable:
    """Youden entries per grid SNR plus a clean reference entry.

    Grid entries whose best J falls below ``min_j`` cannot tell damage from
    normal variation; they are flagged low-confidence and use the clean
    reference threshold (the ``quantile`` of clean scores) instead.
    """
    ref = float(np.quantile(p_clean, quantile))
    entries = []
    for snr, pos in zip(snr_grid, positives):
        t, j, tpr, fpr, low = youden_threshold(p_clean, pos)
        if j < min_j:
            t, low, rule = ref, True, "clean_quantile"
            tpr, fpr = float(np.mean(pos > t)), float(np.mean(p_clean > t))
        else:
            rule = "youden"
        entries.append(ThresholdEntry(float(snr), t, j, tpr, fpr, low, rule))
    entries.append(ThresholdEntry(float(clean_snr), ref, float("nan"), float("nan"), float(np.mean(p_clean > ref)),
                                  False, "clean_quantile"))
    return ThresholdTable(entries)


def calibrate_threshold(bundle: ModelBundle, train: Sequence[SensorBatch], snr_grid: Sequence[float],
                        seed: int, linkage: str = "average", fit_fraction: float = 0.75,
                        max_points: int = MAX_TREE_POINTS, clean_quantile: float = 0.95,
                        min_j: float = 0.2, track_quantile: float = 0.95) -> DamageDetector:
    """Build the tree on one part of the clean training split and calibrate on the rest.

    For each SNR in the grid, each modality of the calibration part is
    corrupted in turn; damage probabilities of the corrupted estimates
    (positives) and of the clean estimates (negatives) fix the
    Youden-optimal threshold.  A reference entry at the median SNR estimate
    of the clean data covers functional sensors.  The tracking threshold is
    the ``track_quantile`` of squared distances between clean sensor pairs,
    which bounds the rate of spurious "far" votes.
    """
    n_mod = bundle.n_modalities
    fit_idx, cal_idx = _split_fit_calibration(train[0].x.shape[1], fit_fraction, seed)
    h_fit = np.hstack([bundle.hidden(l, train[l].x[:, fit_idx]) for l in range(n_mod)])
    tree = build_tree(h_fit, linkage, max_points=max_points, seed=seed)
    cal = [SensorBatch(b.x[:, cal_idx], b.labels[:, cal_idx], b.true_latent[:, cal_idx]) for b in train]
    h_clean = [bundle.hidden(l, cal[l].x) for l in range(n_mod)]
    p_clean = np.concatenate([damage_probabilities(tree, h) for h in h_clean])
    d_clean = np.concatenate([((h_clean[a] - h_clean[b]) ** 2).sum(0)
                              for a, b in itertools.combinations(range(n_mod), 2)])
    clean_snr = float(np.median(np.concatenate([estimate_snr_db(b.x) for b in cal])))
    p_bad = []
    for k, snr in enumerate(snr_grid):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 777, k])))
        p_bad.append(np.concatenate([damage_probabilities(tree, bundle.hidden(l, inject_noise(cal[l], snr, rng).x))
                                     for l in range(n_mod)]))
    t_track = float(np.quantile(d_clean, track_quantile))
    return DamageDetector(tree, _table(p_clean, p_bad, snr_grid, clean_snr, clean_quantile, min_j),
                          t_track, float(np.mean(d_clean > t_track)))
