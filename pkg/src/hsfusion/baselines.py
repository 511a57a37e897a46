"""Reference fusion rules: similar-sensor, dissimilar-sensor, Dempster-Shafer, and feature concatenation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ShapeError
from .fusion import SensorReport
from .nets import LinearClassifier, classify
from .objective import cross_entropy
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-9


@dataclass(frozen=True)
class BaselineWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "w", w)
        if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ContractError(f"baseline weights must lie on the simplex, got {w}")

    @classmethod
    def from_accuracies(cls, acc: Sequence[float]) -> "BaselineWeights":
        a = np.asarray(acc, dtype=float)
        return cls(a / a.sum() if a.sum() > 0 else np.full(a.size, 1.0 / a.size))


def _stack(reports: Sequence[SensorReport], w: BaselineWeights | None = None) -> np.ndarray:
    if not reports:
        raise ContractError("no reports to fuse")
    p = np.stack([r.probs for r in reports])
    if w is not None and w.w.size != len(reports):
        raise ContractError(f"{w.w.size} weights for {len(reports)} reports")
    return p


def geometric_pool(reports: Sequence[SensorReport], exponents: Sequence[float]) -> np.ndarray | None:
    """Normalized ``prod_l P^l(o_i) ** e_l``; ``None`` when every product vanishes."""
    p = _stack(reports)
    e = np.asarray(exponents, dtype=float)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(e > 0, e * np.log(p), 0.0)
    s = logs.sum(axis=0)  # -inf where a weighted sensor rules the object out
    ok = np.isfinite(s)
    if not ok.any():
        return None
    g = np.where(ok, np.exp(s - s[ok].max()), 0.0)
    return g / g.sum()


def similar_fusion(reports: Sequence[SensorReport], w: BaselineWeights, direction: str = "forward") -> SensorReport:
    """Report minimizing ``sum_l w_l KL(r || R^l)``: the weighted geometric mean.

    ``direction="reverse"`` minimizes ``sum_l w_l KL(R^l || r)`` instead, whose
    minimizer is the weighted arithmetic mean.
    """
    p = _stack(reports, w)
    if direction == "reverse":
        return SensorReport(w.w @ p)
    if direction != "forward":
        raise ContractError(f"unknown KL direction {direction!r}")
    out = geometric_pool(reports, w.w)
    if out is None:
        raise ContractError("every object has zero probability under some weighted sensor")
    return SensorReport(out)


def dissimilar_fusion(reports: Sequence[SensorReport], w: BaselineWeights, tol: float = 1e-10) -> SensorReport:
    """Minimize ``sum_l w_l sum_i p_i / P^l(o_i) - sum_i ln p_i`` over the simplex.

    Stationarity gives ``p_i = 1 / (lam + c_i)`` with ``c_i = sum_l w_l / P^l(o_i)``;
    the multiplier ``lam`` is found by bisection on ``sum_i p_i = 1``.
    """
    p = _stack(reports, w)
    if np.any(p < PROB_FLOOR):
        log.debug("dissimilar fusion: flooring zero probabilities at %g", PROB_FLOOR)
        p = np.maximum(p, PROB_FLOOR)
    c = w.w @ (1.0 / p)
    n = c.size

    def total(lam):
        return np.sum(1.0 / (lam + c))

    floor = -c.min()  # total -> inf as lam -> floor+
    lo, hi = floor, n - c.min()  # at hi every p_i <= 1/n
    if not total(hi) <= 1.0:
        raise NumericError(f"bisection bracket failed: sum at hi={hi} is {total(hi)}")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if total(mid) > 1.0:
            lo = mid
        else:
            hi = mid
    lam = min([hi] + ([lo] if lo > floor else []), key=lambda v: abs(total(v) - 1.0))
    out = 1.0 / (lam + c)
    if abs(out.sum() - 1.0) > tol:
        raise NumericError(f"bisection stalled: |sum p - 1| = {abs(out.sum() - 1.0):.3g} (lam={lam})")
    return SensorReport(out)


def dissimilar_kkt_residual(p: np.ndarray, reports: Sequence[SensorReport], w: BaselineWeights) -> float:
    """Max stationarity violation ``|c_i - 1/p_i + lam|`` with the best common ``lam``."""
    c = w.w @ (1.0 / np.maximum(_stack(reports), PROB_FLOOR))
    r = c - 1.0 / p
    lam = -r.mean()
    return float(np.max(np.abs(r + lam)))


def dempster_shafer(reports: Sequence[SensorReport]) -> SensorReport | None:
    """Dempster's rule on singleton masses; ``None`` (abstain) under total conflict."""
    p = _stack(reports)
    prod = np.prod(p, axis=0)
    agreement = prod.sum()  # 1 - K
    if agreement <= 0.0:
        return None
    return SensorReport(prod / agreement)


@dataclass
class ConcatClassifier:
    """Softmax classifier over the stacked raw observations of all sensors."""

    clf: LinearClassifier
    dims: tuple[int, ...]
    mean: np.ndarray
    scale: np.ndarray

    def _inputs(self, features: Sequence[np.ndarray]) -> np.ndarray:
        if tuple(np.shape(f)[0] for f in features) != self.dims:
            raise ShapeError(f"feature lengths {[np.shape(f)[0] for f in features]} != trained {self.dims}")
        x = np.vstack([np.asarray(f, dtype=float).reshape(len(f), -1) for f in features])
        return (x - self.mean) / self.scale

    def predict_proba(self, features: Sequence[np.ndarray]) -> np.ndarray:
        with T.no_grad():
            return classify(self.clf, Tensor(self._inputs(features))).data


def concat_classifier(model: ConcatClassifier, features: Sequence[np.ndarray]) -> SensorReport:
    """Report for one sample given per-sensor feature vectors."""
    return SensorReport(model.predict_proba([np.asarray(f, dtype=float)[:, None] for f in features])[:, 0])


def train_concat(features: Sequence[np.ndarray], labels: np.ndarray, seed: int, epochs: int = 60,
                 rate: float = 0.05, batch_size: int = 64) -> ConcatClassifier:
    """Fit the concatenation baseline by minibatch SGD on the summed cross-entropy (averaged per batch)."""
    x = np.vstack(features)
    mean = x.mean(axis=1, keepdims=True)
    scale = x.std(axis=1, keepdims=True) + 1e-8
    xs = (x - mean) / scale
    n_cls, n = labels.shape
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 99])))
    w = Tensor(rng.normal(0.0, np.sqrt(1.0 / xs.shape[0]), size=(n_cls, xs.shape[0])), True, "concat.w")
    b = Tensor(np.zeros(n_cls), True, "concat.b")
    clf = LinearClassifier(w, b)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = cross_entropy(classify(clf, Tensor(xs[:, idx])), labels[:, idx]) * (1.0 / idx.size)
            T.backward(loss)
            T.sgd_step([w, b], rate)
    return ConcatClassifier(clf, tuple(f.shape[0] for f in features), mean, scale)
