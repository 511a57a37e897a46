"""Loss terms and the alternating critic/generator training schedule.

The full objective for modality ``l`` is

    V(G^l, D) + gamma1 * ||S^l||_{inf,1} + gamma2 * sum_{m != l} ||[Z^l, Z^m]||_F^2
              + gamma3 * CE(C^l(S^l G^l(X^l)), Y)

with ``V`` the Wasserstein value the critic maximizes.  Each minibatch runs,
for ``l = 1..L`` in order, one critic ascent step (followed by clamping) and
one descent step on modality ``l``'s classifier, selection matrix, ``Z^l``
and generator body.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .nets import (
    CriticNet,
    ModelBundle,
    SelectionMatrix,
    classify,
    critic_scores,
    generate,
    select_features,
)
from .tensor import Tensor

LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    gamma1: float = 1e-3
    gamma2: float = 1e-2
    gamma3: float = 1.0
    clamp_box: float = 0.01
    mu_g: float = 5e-4
    mu_d: float = 5e-4

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3", "mu_g", "mu_d"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.clamp_box <= 0:
            raise ContractError("clamp_box must be positive")


@dataclass
class TrainState:
    epoch: int = 0
    wasserstein: list[float] = field(default_factory=list)
    commutation: list[float] = field(default_factory=list)
    linf1: list[float] = field(default_factory=list)
    xent: list[float] = field(default_factory=list)
    pairwise_dist: list[float] = field(default_factory=list)
    acc: list[list[float]] = field(default_factory=list)

    def record(self, wasserstein, commutation, linf1, xent, pairwise_dist, acc) -> None:
        self.wasserstein.append(float(wasserstein))
        self.commutation.append(float(commutation))
        self.linf1.append(float(linf1))
        self.xent.append(float(xent))
        self.pairwise_dist.append(float(pairwise_dist))
        self.acc.append([float(a) for a in acc])
        self.epoch += 1

    def csv_header(self, n_modalities: int) -> list[str]:
        return ["epoch", "wasserstein", "commutation", "linf1", "xent", "pairwise_dist_sum"] + [
            f"acc_modality_{l + 1}" for l in range(n_modalities)
        ]

    def csv_rows(self, first_epoch: int = 1) -> list[list[float]]:
        rows = []
        for k in range(len(self.wasserstein)):
            rows.append([first_epoch + k, self.wasserstein[k], self.commutation[k], self.linf1[k],
                         self.xent[k], self.pairwise_dist[k], *self.acc[k]])
        return rows


class _Batch(Protocol):
    x: np.ndarray
    labels: np.ndarray


# ---------------------------------------------------------------- loss terms


def _head_means(scores: Tensor, n: int) -> list[Tensor]:
    return [T.mean(T.take_row(scores, m)) for m in range(n)]


def wasserstein_value(h_by_modality: Sequence[Tensor], dnet: CriticNet) -> list[Tensor]:
    """Per-generator value ``sum_{m != l} E[D^m(H^m)] - E[D^m(H^l)]``."""
    n = len(h_by_modality)
    if n < 2:
        raise ContractError("fusion needs at least 2 modalities")
    if len({h.shape[1] for h in h_by_modality}) != 1:
        raise ShapeError("hidden estimates must share one batch size")
    means = [_head_means(critic_scores(dnet, h), n) for h in h_by_modality]
    values = []
    for l in range(n):
        terms = [means[m][m] - means[l][m] for m in range(n) if m != l]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        values.append(total)
    return values


def commutation_penalty(z: Sequence[Tensor]) -> Tensor:
    """``sum_l sum_{m != l} ||Z^l Z^m - Z^m Z^l||_F^2`` (each pair counted twice)."""
    if not z:
        raise ContractError("no operators given")
    n = z[0].shape[0]
    for zl in z:
        if zl.data.ndim != 2 or zl.shape != (n, n):
            raise ContractError(f"commutation needs square matrices of one size, got {zl.shape}")
    total = Tensor(0.0)
    for l in range(len(z)):
        for m in range(l + 1, len(z)):
            comm = z[l] @ z[m] - z[m] @ z[l]
            total = total + 2.0 * T.sum(T.square(comm))
    return total


def linf1_norm(s: SelectionMatrix | Tensor) -> Tensor:
    """Sum over columns of the largest absolute entry."""
    mat = s.s if isinstance(s, SelectionMatrix) else s
    return T.sum(T.colmax_abs(mat))


def _check_one_hot(labels: np.ndarray) -> None:
    if not (np.all((labels == 0.0) | (labels == 1.0)) and np.all(labels.sum(axis=0) == 1.0)):
        raise ContractError("labels must be one-hot columns")


def cross_entropy(probs: Tensor, labels: Tensor | np.ndarray) -> Tensor:
    """Summed negative log-likelihood of the true class, ``log`` floored at 1e-12."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=float)
    if y.shape != probs.shape:
        raise ShapeError(f"labels {y.shape} vs probabilities {probs.shape}")
    _check_one_hot(y)
    return -T.sum(Tensor(y) * T.log(T.clip_min(probs, LOG_FLOOR)))


def pairwise_hidden_distance(h_by_modality: Sequence[Tensor | np.ndarray]) -> np.ndarray:
    """Per hidden coordinate: sum over ordered modality pairs of squared gaps, batch-averaged."""
    hs = [h.data if isinstance(h, Tensor) else np.asarray(h) for h in h_by_modality]
    if len({h.shape for h in hs}) != 1:
        raise ShapeError("hidden estimates must share one shape")
    total = np.zeros(hs[0].shape[0])
    for l in range(len(hs)):
        for m in range(l + 1, len(hs)):
            total += 2.0 * np.mean((hs[l] - hs[m]) ** 2, axis=1)
    return total


# ---------------------------------------------------------------- selection prox


def prox_linf(v: np.ndarray, t: float) -> np.ndarray:
    """Proximal map of ``t * ||.||_inf``: ``v`` minus its projection onto the l1 ball of radius t."""
    if t <= 0:
        return v.copy()
    a = np.abs(v)
    if a.sum() <= t:
        return np.zeros_like(v)
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    rho = np.flatnonzero(u - (css - t) / k > 0)[-1]
    theta = (css[rho] - t) / (rho + 1.0)
    proj = np.sign(v) * np.maximum(a - theta, 0.0)
    return v - proj


def prox_linf1_(s: Tensor, t: float) -> None:
    """Column-wise ``prox_linf`` applied in place."""
    for j in range(s.shape[1]):
        s.data[:, j] = prox_linf(s.data[:, j], t)


# ---------------------------------------------------------------- training


class Optimizers:
    """Per-group update rules: plain SGD by default, Adam on request."""

    def __init__(self, n_modalities: int, weights: LossWeights, kind: str = "sgd"):
        if kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.weights = weights
        if kind == "adam":
            self.critic = T.Adam(weights.mu_d)
            self.gens = [T.Adam(weights.mu_g) for _ in range(n_modalities)]

    def step_critic(self, params):
        if self.kind == "sgd":
            T.sgd_step(params, self.weights.mu_d)
        else:
            self.critic.step(params)

    def step_modality(self, l, params):
        if self.kind == "sgd":
            T.sgd_step(params, self.weights.mu_g)
        else:
            self.gens[l].step(params)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        if self.kind == "sgd":
            return []
        out = []
        for tag, opt in [("d", self.critic)] + [(f"g{l}", o) for l, o in enumerate(self.gens)]:
            out.append((f"adam.{tag}.t", np.array([float(opt.t)])))
            for name in sorted(opt.m):
                out.append((f"adam.{tag}.m.{name}", opt.m[name]))
                out.append((f"adam.{tag}.v.{name}", opt.v[name]))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if self.kind == "sgd":
            return
        for tag, opt in [("d", self.critic)] + [(f"g{l}", o) for l, o in enumerate(self.gens)]:
            prefix = f"adam.{tag}."
            if prefix + "t" in arrays:
                opt.t = int(arrays[prefix + "t"][0])
            for key, val in arrays.items():
                if key.startswith(prefix + "m."):
                    opt.m[key[len(prefix) + 2:]] = val.copy()
                elif key.startswith(prefix + "v."):
                    opt.v[key[len(prefix) + 2:]] = val.copy()


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))


def _critic_step(bundle: ModelBundle, hs: list[Tensor], weights: LossWeights, opt: Optimizers) -> None:
    params = bundle.critic.params()
    values = wasserstein_value(hs, bundle.critic)
    total = values[0]
    for v in values[1:]:
        total = total + v
    T.backward(-total)  # ascent
    opt.step_critic(params)
    for p in params:
        T.clamp_(p, -weights.clamp_box, weights.clamp_box)


def _generator_step(bundle: ModelBundle, l: int, x: Tensor, y: np.ndarray, weights: LossWeights,
                    opt: Optimizers, selection_step: str) -> None:
    n = bundle.n_modalities
    h = generate(bundle.generators[l], x)
    scores = critic_scores(bundle.critic, h)
    # other generators' estimates are fixed targets, so only this expectation depends on G^l
    loss = -T.sum(T.mean(scores, axis=1)) + T.mean(T.take_row(scores, l))
    if weights.gamma3:
        probs = classify(bundle.classifiers[l], select_features(bundle.selections[l], h))
        loss = loss + weights.gamma3 * cross_entropy(probs, y)
    if weights.gamma1 and selection_step == "subgradient":
        loss = loss + weights.gamma1 * linf1_norm(bundle.selections[l])
    if weights.gamma2:
        loss = loss + weights.gamma2 * commutation_penalty([g.z_matrix for g in bundle.generators])
    params = bundle.modality_params(l)
    if loss.requires_grad:
        T.backward(loss)
    opt.step_modality(l, params)
    T.zero_grad(bundle.critic.params())
    for m in range(n):
        if m != l:
            bundle.generators[m].z_matrix.zero_grad()
    if weights.gamma1 and selection_step == "prox":
        prox_linf1_(bundle.selections[l].s, weights.mu_g * weights.gamma1)


def evaluate_terms(bundle: ModelBundle, batches: Sequence[_Batch]) -> dict:
    """Loss terms, pairwise hidden distance and accuracies on full (clean) batches."""
    n = bundle.n_modalities
    with T.no_grad():
        hs = [generate(bundle.generators[l], Tensor(batches[l].x)) for l in range(n)]
        values = wasserstein_value(hs, bundle.critic)
        comm = commutation_penalty([g.z_matrix for g in bundle.generators]).item()
        lin = float(np.sum([linf1_norm(s).item() for s in bundle.selections]))
        xent, acc = 0.0, []
        n_samples = batches[0].x.shape[1]
        for l in range(n):
            probs = classify(bundle.classifiers[l], select_features(bundle.selections[l], hs[l]))
            xent += cross_entropy(probs, batches[l].labels).item() / n_samples
            acc.append(float(np.mean(probs.data.argmax(axis=0) == batches[l].labels.argmax(axis=0))))
    return {
        "wasserstein": float(np.sum([v.item() for v in values])),
        "commutation": comm,
        "linf1": lin,
        "xent": xent,
        "pairwise_dist": float(pairwise_hidden_distance(hs).sum()),
        "acc": acc,
        "hidden": [h.data for h in hs],
    }


def train_epoch(bundle: ModelBundle, batch_by_modality: Sequence[_Batch], weights: LossWeights,
                state: TrainState, batch_size: int = 64, opt: Optimizers | None = None,
                selection_step: str = "prox") -> TrainState:
    """One pass over the aligned training samples; appends one history entry."""
    n = bundle.n_modalities
    if len(batch_by_modality) != n:
        raise ContractError(f"expected {n} modality batches, got {len(batch_by_modality)}")
    if n < 2:
        raise ContractError("fusion needs at least 2 modalities")
    n_samples = batch_by_modality[0].x.shape[1]
    for b in batch_by_modality:
        if b.x.shape[1] != n_samples or b.labels.shape[1] != n_samples:
            raise ContractError("modality batches are not sample-aligned")
    if selection_step not in ("prox", "subgradient"):
        raise ContractError(f"unknown selection step {selection_step!r}")
    opt = opt or Optimizers(n, weights)
    labels = batch_by_modality[0].labels
    order = epoch_rng(bundle.seed, bundle.epoch).permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        idx = order[start : start + batch_size]
        xs = [Tensor(b.x[:, idx]) for b in batch_by_modality]
        y = labels[:, idx]
        for l in range(n):
            with T.no_grad():
                hs = [generate(bundle.generators[m], xs[m]) for m in range(n)]
            _critic_step(bundle, hs, weights, opt)
            _generator_step(bundle, l, xs[l], y, weights, opt, selection_step)
    terms = evaluate_terms(bundle, batch_by_modality)
    state.record(terms["wasserstein"], terms["commutation"], terms["linf1"], terms["xent"],
                 terms["pairwise_dist"], terms["acc"])
    bundle.epoch += 1
    bundle.acc_train = terms["acc"]
    return state


def mean_commutator_norm(bundle: ModelBundle) -> float:
    """Mean Frobenius norm of ``[Z^l, Z^m]`` over unordered pairs."""
    z = [g.z_matrix.data for g in bundle.generators]
    norms = [np.linalg.norm(z[l] @ z[m] - z[m] @ z[l]) for l in range(len(z)) for m in range(l + 1, len(z))]
    return float(np.mean(norms))
