"""Two-dimensional shape-to-shape generator study.

A small generator maps samples of a source shape (the conditioning input)
onto a target shape, trained adversarially against either a logistic
discriminator (non-saturating loss) or a weight-clipped Wasserstein critic.
A one-dimensional source such as the unit circle can only produce a curve,
so it covers a square target poorly, while a thin two-dimensional band
(the disk) can be stretched over it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plotting
from . import tensor as T
from .config import RunConfig, ToyConfig
from .nets import Dense
from .simdata import ShapeDistribution, coverage_fraction, sample_shape
from .tensor import Tensor

TASKS = (("circle", "square"), ("square", "circle"), ("disk", "square"), ("square", "disk"), ("square", "square"))
TOY_HEADER = ["source", "target", "coverage", "ring_violation", "seed"]


@dataclass
class ToyResult:
    source: str
    target: str
    coverage: float
    ring_violation: float
    source_pts: np.ndarray
    generated: np.ndarray
    target_pts: np.ndarray


def _mlp(rng: np.random.Generator, widths: list[int], tag: str) -> list[Dense]:
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / a), size=(b, a))
        layers.append(Dense(Tensor(w, True, f"{tag}{i}.w"), Tensor(np.zeros(b), True, f"{tag}{i}.b")))
    return layers


def _forward(layers: list[Dense], x: Tensor) -> Tensor:
    for k, layer in enumerate(layers):
        x = layer(x)
        if k < len(layers) - 1:
            x = T.relu(x)
    return x


def _params(layers: list[Dense]) -> list[Tensor]:
    return [p for layer in layers for p in layer.params()]


def softplus(x: Tensor) -> Tensor:
    """``log(1 + e^x)`` in the overflow-free form ``relu(x) + log(1 + e^-|x|)``."""
    return T.relu(x) + T.log(T.exp(-T.abs(x)) + 1.0)


def _critic_loss(kind: str, real: Tensor, fake: Tensor) -> Tensor:
    if kind == "wasserstein":
        return T.mean(fake) - T.mean(real)
    return T.mean(softplus(-real)) + T.mean(softplus(fake))


def _generator_loss(kind: str, fake: Tensor) -> Tensor:
    return -T.mean(fake) if kind == "wasserstein" else T.mean(softplus(-fake))


def _optimizer(kind: str, rate: float):
    return T.RMSProp(rate) if kind == "rmsprop" else T.Adam(rate, beta1=0.5, beta2=0.9)


def train_shape_map(source: str, target: str, cfg: ToyConfig, seed: int) -> ToyResult:
    """Fit a generator from ``source`` samples to ``target`` samples and score the fit on fresh samples."""
    src_dist, tgt_dist = ShapeDistribution(source, cfg.eps), ShapeDistribution(target, cfg.eps)
    key = TASKS.index((source, target)) if (source, target) in TASKS else len(TASKS)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 61, key])))
    src = sample_shape(src_dist, cfg.n_samples, seed * 1000 + 2 * key)
    tgt = sample_shape(tgt_dist, cfg.n_samples, seed * 1000 + 2 * key + 1)
    gen = _mlp(rng, [2, cfg.width, cfg.width, 2], "g")
    critic = _mlp(rng, [2, cfg.width, cfg.width, 1], "d")
    clip = cfg.loss == "wasserstein"
    if clip:
        for p in _params(critic):
            T.clamp_(p, -cfg.clamp, cfg.clamp)
    g_opt, d_opt = _optimizer(cfg.optimizer, cfg.rate), _optimizer(cfg.optimizer, cfg.rate)
    b = min(cfg.batch_size, cfg.n_samples)
    for _ in range(cfg.iterations):
        for _ in range(cfg.critic_iters):
            real = Tensor(tgt[rng.choice(cfg.n_samples, b, replace=False)].T)
            with T.no_grad():
                fake = _forward(gen, Tensor(src[rng.choice(cfg.n_samples, b, replace=False)].T))
            T.backward(_critic_loss(cfg.loss, _forward(critic, real), _forward(critic, fake)))
            d_opt.step(_params(critic))
            if clip:
                for p in _params(critic):
                    T.clamp_(p, -cfg.clamp, cfg.clamp)
        fake = _forward(gen, Tensor(src[rng.choice(cfg.n_samples, b, replace=False)].T))
        T.backward(_generator_loss(cfg.loss, _forward(critic, fake)))
        g_opt.step(_params(gen))
        T.zero_grad(_params(critic))
    fresh = sample_shape(src_dist, cfg.n_samples, seed * 1000 + 500 + key)
    with T.no_grad():
        out = _forward(gen, Tensor(fresh.T)).data.T
    coverage = coverage_fraction(out, cfg.grid) if target == "square" else float("nan")
    ring = float(np.mean(np.abs((out**2).sum(axis=1) - 1.0))) if target != "square" else float("nan")
    return ToyResult(source, target, coverage, ring, fresh, out, tgt)


def run_toyshapes(cfg: RunConfig, out: str | Path | None = None, plots: bool = True) -> list[ToyResult]:
    from .pipeline import _prepare, write_csv

    results = [train_shape_map(s, t, cfg.toyshapes, cfg.seed) for s, t in TASKS]
    if out is not None:
        out = _prepare(out, cfg)
        write_csv(out / "toyshapes.csv", TOY_HEADER,
                  [[r.source, r.target, r.coverage, r.ring_violation, cfg.seed] for r in results])
        if plots:
            for r in results:
                plotting.shape_scatter(out / f"toy_{r.source}_to_{r.target}.svg", r.source_pts, r.generated,
                                       r.target_pts, f"{r.source} to {r.target}")
    return results
