"""Event-driven decision fusion with per-sensor uncertainty.

Each sensor reports object probabilities ``P^l(o_i)`` with a degree of
confidence ``DoC^l``.  The report is augmented with an "uncertain" outcome
of mass ``1 - DoC^l``; a joint distribution over the outcome tuples of all
sensors is formed as a ``rho``-blend of the independent coupling and a
maximal-mutual-information coupling, and the fused probability of ``o_i`` is
the mass of tuples whose confident entries all name ``o_i``.

Couplings are stored densely as arrays of shape ``(I+1,) * L`` whose last
index along every axis is the uncertain outcome.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ContractError, FusionError

TOL = 1e-9


@dataclass(frozen=True)
class SensorReport:
    probs: np.ndarray
    doc: float = 1.0
    modality: int | None = None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > TOL:
            raise ContractError(f"report probabilities must be a distribution, got {p}")
        if not 0.0 <= self.doc <= 1.0:
            raise ContractError(f"degree of confidence must lie in [0, 1], got {self.doc}")


@dataclass(frozen=True)
class AugmentedReport:
    probs: np.ndarray  # I object masses followed by the uncertain mass

    @property
    def n_objects(self) -> int:
        return self.probs.size - 1


@dataclass(frozen=True)
class FusedReport:
    probs: np.ndarray
    doc: float


@dataclass(frozen=True)
class Coupling:
    mass: np.ndarray

    @property
    def n_sensors(self) -> int:
        return self.mass.ndim

    def marginal(self, l: int) -> np.ndarray:
        axes = tuple(a for a in range(self.mass.ndim) if a != l)
        return self.mass.sum(axis=axes)


def augment(report: SensorReport) -> AugmentedReport:
    doc = float(report.doc)
    return AugmentedReport(np.append(doc * report.probs, 1.0 - doc))


def _check_reports(reports: Sequence[AugmentedReport]) -> list[np.ndarray]:
    if len(reports) < 2:
        raise ContractError("fusion needs at least 2 reports")
    ps = [np.asarray(r.probs, dtype=float) for r in reports]
    if len({p.size for p in ps}) != 1:
        raise ContractError("reports disagree on the number of objects")
    return ps


def min_mi_coupling(reports: Sequence[AugmentedReport]) -> Coupling:
    """Independent coupling: the outer product of the marginals."""
    ps = _check_reports(reports)
    mass = ps[0]
    for p in ps[1:]:
        mass = np.multiply.outer(mass, p)
    return Coupling(mass)


def mutual_information(c: Coupling) -> float:
    """Total correlation ``sum_l H(marginal_l) - H(joint)`` in nats."""

    def entropy(p):
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    return sum(entropy(c.marginal(l)) for l in range(c.n_sensors)) - entropy(c.mass.ravel())


def _label_greedy(ps: list[np.ndarray], eps: float = 1e-15) -> np.ndarray:
    """Matched outcomes first, then repeatedly pair the largest leftovers."""
    n, dims = ps[0].size, len(ps)
    mass = np.zeros((n,) * dims)
    diag = np.min(np.stack(ps), axis=0)
    for a in range(n):
        mass[(a,) * dims] = diag[a]
    rem = [p - diag for p in ps]
    for _ in range(dims * n + 1):
        tops = [int(np.argmax(r)) for r in rem]
        m = min(r[t] for r, t in zip(rem, tops))
        if m <= eps:
            break
        mass[tuple(tops)] += m
        for r, t in zip(rem, tops):
            r[t] -= m
    return mass


def _northwest(ps: list[np.ndarray], orders: Sequence[Sequence[int]], eps: float = 1e-15) -> np.ndarray:
    """North-west-corner fill of the joint along the given outcome orderings."""
    n, dims = ps[0].size, len(ps)
    mass = np.zeros((n,) * dims)
    rem = [[float(p[i]) for i in o] for p, o in zip(ps, orders)]
    pos = [0] * dims
    while all(k < n for k in pos):
        m = min(r[k] for r, k in zip(rem, pos))
        mass[tuple(o[k] for o, k in zip(orders, pos))] += m
        for l in range(dims):
            rem[l][pos[l]] -= m
            if rem[l][pos[l]] <= eps:
                pos[l] += 1
    return mass


def _joint_entropy(mass: np.ndarray) -> float:
    p = mass[mass > 0]
    return float(-(p * np.log(p)).sum())


def _candidate_orders(ps: list[np.ndarray]):
    label = tuple(range(ps[0].size))
    per_sensor = [(label, tuple(int(i) for i in np.argsort(-p, kind="stable"))) for p in ps]
    seen = set()
    for combo in itertools.product(*per_sensor):
        if combo not in seen:
            seen.add(combo)
            yield combo


@lru_cache(maxsize=None)
def _tree_maps(n: int) -> np.ndarray:
    """Linear maps from stacked marginals ``(p, q)`` to the joint, one per spanning tree.

    Vertices of the two-sensor coupling polytope are supported on spanning
    trees of the row/column graph; each tree's joint is found by peeling
    leaves.  Shape ``(trees, n * n, 2 * n)``.
    """
    maps = []
    for support in itertools.combinations(range(n * n), 2 * n - 1):
        parent = list(range(2 * n))

        def root(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        acyclic = True
        for cell in support:
            ra, rb = root(cell // n), root(n + cell % n)
            if ra == rb:
                acyclic = False
                break
            parent[ra] = rb
        if not acyclic:
            continue
        m = np.zeros((n * n, 2 * n))
        open_cells = set(support)
        assigned = np.zeros((2 * n, 2 * n))  # per node: mass already placed, as a map
        while open_cells:
            for node in range(2 * n):
                touching = [c for c in open_cells if (c // n if node < n else n + c % n) == node]
                if len(touching) == 1:
                    break
            cell = touching[0]
            value = -assigned[node]
            value[node] += 1.0
            m[cell] = value
            assigned[cell // n] += value
            assigned[n + cell % n] += value
            open_cells.remove(cell)
        maps.append(m)
    out = np.stack(maps)
    out.setflags(write=False)
    return out


def _best_vertex(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    n = p.size
    joints = _tree_maps(n) @ np.concatenate([p, q])
    feasible = np.all(joints >= -1e-12, axis=1)
    joints = np.maximum(joints[feasible], 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(joints > 0, joints * np.log(joints), 0.0).sum(axis=1)
    return joints[int(np.argmin(h))].reshape(n, n)


def max_mi_coupling(reports: Sequence[AugmentedReport], exhaustive_limit: int = 4) -> Coupling:
    """Coupling with the given marginals and (near-)maximal mutual information.

    Mutual information is convex in the joint for fixed marginals, so its
    maximum sits at a vertex of the coupling polytope.  For two sensors with
    at most ``exhaustive_limit`` outcomes every vertex is scored, which makes
    the result exact.  Otherwise the candidates are the label-matched greedy
    coupling and north-west-corner fills along the label and descending-mass
    orderings of each sensor.  The label-matched coupling wins ties.
    """
    ps = _check_reports(reports)
    # the marginals are fixed, so maximal information means minimal joint entropy
    best = _label_greedy(ps)
    best_h = _joint_entropy(best)
    if len(ps) == 2 and ps[0].size <= exhaustive_limit:
        candidates = [_best_vertex(ps[0], ps[1])]
    else:
        candidates = (_northwest(ps, orders) for orders in _candidate_orders(ps))
    for cand in candidates:
        h = _joint_entropy(cand)
        if h < best_h - 1e-12:
            best, best_h = cand, h
    c = Coupling(best)
    for l, p in enumerate(ps):
        if np.max(np.abs(c.marginal(l) - p)) > TOL:
            raise FusionError(f"max-MI coupling lost marginal {l}")
    return c


def blend(max_c: Coupling, min_c: Coupling, rho: float) -> Coupling:
    if not 0.0 <= rho <= 1.0:
        raise ContractError(f"rho must lie in [0, 1], got {rho}")
    if max_c.mass.shape != min_c.mass.shape:
        raise ContractError("couplings have different shapes")
    return Coupling(rho * max_c.mass + (1.0 - rho) * min_c.mass)


@lru_cache(maxsize=None)
def _object_masks(n_sensors: int, n_outcomes: int) -> np.ndarray:
    """``masks[i]`` marks tuples whose confident entries all equal object ``i`` (not all uncertain)."""
    unc = n_outcomes - 1
    grid = np.indices((n_outcomes,) * n_sensors)
    all_unc = np.all(grid == unc, axis=0)
    masks = np.stack([np.all((grid == i) | (grid == unc), axis=0) & ~all_unc for i in range(unc)])
    masks.setflags(write=False)
    return masks


def fuse(coupling: Coupling, renormalize: bool = False) -> FusedReport:
    """Fused object probabilities and fused degree of confidence.

    Mass on tuples where confident sensors disagree is left unassigned
    unless ``renormalize`` spreads it proportionally over the objects.
    """
    mass = coupling.mass
    masks = _object_masks(mass.ndim, mass.shape[0])
    probs = np.array([mass[m].sum() for m in masks])
    doc = 1.0 - float(mass[(-1,) * mass.ndim])
    doc = min(max(doc, 0.0), 1.0)
    if renormalize and probs.sum() > 0:
        probs = probs * (doc / probs.sum())
    return FusedReport(probs, doc)


def decide(fused: FusedReport) -> int | None:
    """Index of the most probable object (lowest index on ties); ``None`` means abstain."""
    if fused.probs.size == 0 or not np.any(fused.probs > 0):
        return None
    return int(np.argmax(fused.probs))


def fuse_reports(reports: Sequence[SensorReport], rho: float, renormalize: bool = False) -> FusedReport:
    aug = [augment(r) for r in reports]
    return fuse(blend(max_mi_coupling(aug), min_mi_coupling(aug), rho), renormalize)


def estimate_rho(probs_by_modality: Sequence[np.ndarray]) -> float:
    """Experimental: mean correlation of per-class decision indicators across sensor pairs, clipped to [0, 1]."""
    decisions = [np.asarray(p).argmax(axis=0) for p in probs_by_modality]
    n_cls = np.asarray(probs_by_modality[0]).shape[0]
    corrs = []
    for a, b in itertools.combinations(decisions, 2):
        for i in range(n_cls):
            u, v = (a == i).astype(float), (b == i).astype(float)
            if u.std() > 0 and v.std() > 0:
                corrs.append(np.corrcoef(u, v)[0, 1])
    return float(np.clip(np.mean(corrs), 0.0, 1.0)) if corrs else 0.0
