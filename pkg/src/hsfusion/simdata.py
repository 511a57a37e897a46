"""Synthetic multi-modal sensor data with a known latent space.

Every event ``n`` has a class ``y_n`` and a shared latent ``h*_n`` drawn around
that class's center.  Sensor ``l`` also sees a private latent ``p^l_n`` and
records ``x^l_n = f(A^l [h*_n; p^l_n]) + noise``, where the columns of
``A^l`` are smooth random waveforms over the ``d_l`` samples of the sensor.
Observations are therefore band-limited signals, and white noise added on
top can be measured back from the signal alone (see
:func:`hsfusion.failure.estimate_snr_db`).

Random streams come from numpy's counter-based Philox generator keyed by
``(seed, purpose)``, so the two splits and the embeddings never share draws.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import ContractError

_STREAM = {"embed": 0, "train": 1, "test": 2}


@dataclass(frozen=True)
class ScenarioConfig:
    modalities: int = 3
    classes: int = 3
    latent_dim: int = 16
    private_dims: tuple[int, ...] = (4, 4, 4)
    input_dims: tuple[int, ...] = (64, 48, 80)
    n_train: int = 2000
    n_test: int = 600
    class_separation: float = 3.0
    private_separation: float = 2.0
    sensor_noise: tuple[float, ...] = (0.02, 0.02, 0.02)
    latent_gain: tuple[float, ...] = (1.0, 0.6, 1.0)
    nonlinear: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("private_dims", "input_dims", "sensor_noise", "latent_gain"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.modalities < 2:
            raise ContractError("fusion needs at least 2 modalities")
        for name in ("private_dims", "input_dims", "sensor_noise", "latent_gain"):
            if len(getattr(self, name)) != self.modalities:
                raise ContractError(f"{name} needs one entry per modality")
        if self.classes < 1 or self.latent_dim < 1 or self.n_train < 1 or self.n_test < 0:
            raise ContractError("scenario sizes must be positive")
        if any(p < 0 for p in self.private_dims):
            raise ContractError("private_dims must be non-negative")
        if any(d < self.latent_dim for d in self.input_dims):
            raise ContractError("every observation must be at least as long as the shared latent")
        if any(s < 0 for s in self.sensor_noise) or self.class_separation < 0:
            raise ContractError("noise levels and separations must be non-negative")


@dataclass
class SensorBatch:
    x: np.ndarray  # d_l x B
    labels: np.ndarray  # one-hot, I x B
    true_latent: np.ndarray  # d_H_true x B; diagnostics only
    snr_db: np.ndarray = field(default=None)  # per sample, +inf when clean
    damaged: np.ndarray = field(default=None)  # per sample

    def __post_init__(self):
        b = self.x.shape[1]
        if self.snr_db is None:
            self.snr_db = np.full(b, np.inf)
        if self.damaged is None:
            self.damaged = np.zeros(b, dtype=bool)
        if self.labels.shape[1] != b or self.true_latent.shape[1] != b:
            raise ContractError("batch columns are not aligned")

    @property
    def y(self) -> np.ndarray:
        return self.labels.argmax(axis=0)

    def __len__(self) -> int:
        return self.x.shape[1]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def _class_centers(rng: np.random.Generator, n_classes: int, dim: int, separation: float) -> np.ndarray:
    """Random centers rescaled so their mean pairwise distance equals ``separation``."""
    c = rng.normal(size=(n_classes, dim))
    if n_classes < 2 or separation == 0:
        return np.zeros_like(c)
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    mean_d = d[np.triu_indices(n_classes, 1)].mean()
    return c * (separation / mean_d)


def _smooth_embedding(rng: np.random.Generator, length: int, n_cols: int, n_harmonics: int = 4) -> np.ndarray:
    t = np.linspace(0.0, 1.0, length)
    freqs = rng.uniform(0.5, 3.0, size=(n_cols, n_harmonics))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n_cols, n_harmonics))
    amp = rng.normal(size=(n_cols, n_harmonics))
    waves = (amp[:, :, None] * np.cos(2 * np.pi * freqs[:, :, None] * t + phase[:, :, None])).sum(axis=1)
    waves /= np.sqrt(n_cols * n_harmonics)
    return waves.T  # length x n_cols


@dataclass
class _Generative:
    centers: np.ndarray
    private_centers: list[np.ndarray]
    embeddings: list[np.ndarray]


def _generative(cfg: ScenarioConfig) -> _Generative:
    rng = _rng(cfg.seed, _STREAM["embed"])
    centers = _class_centers(rng, cfg.classes, cfg.latent_dim, cfg.class_separation)
    privs, embeds = [], []
    for l in range(cfg.modalities):
        p = cfg.private_dims[l]
        privs.append(_class_centers(rng, cfg.classes, p, cfg.private_separation) if p else np.zeros((cfg.classes, 0)))
        a = _smooth_embedding(rng, cfg.input_dims[l], cfg.latent_dim + p)
        a[:, : cfg.latent_dim] *= cfg.latent_gain[l]
        embeds.append(a)
    return _Generative(centers, privs, embeds)


def generate_scenario(cfg: ScenarioConfig, split: str = "train") -> list[SensorBatch]:
    """Sample-aligned batches, one per modality, for the ``train`` or ``test`` split."""
    if split not in ("train", "test"):
        raise ContractError(f"unknown split {split!r}")
    gen = _generative(cfg)
    n = cfg.n_train if split == "train" else cfg.n_test
    rng = _rng(cfg.seed, _STREAM[split])
    y = rng.integers(0, cfg.classes, size=n)
    labels = np.zeros((cfg.classes, n))
    labels[y, np.arange(n)] = 1.0
    latent = gen.centers[y].T + rng.normal(size=(cfg.latent_dim, n))
    batches = []
    for l in range(cfg.modalities):
        p = cfg.private_dims[l]
        private = gen.private_centers[l][y].T + rng.normal(size=(p, n))
        pre = gen.embeddings[l] @ np.vstack([latent, private])
        x = np.tanh(pre) if cfg.nonlinear else pre
        x = x + cfg.sensor_noise[l] * rng.normal(size=x.shape)
        batches.append(SensorBatch(x, labels.copy(), latent.copy()))
    return batches


def inject_noise(batch: SensorBatch, snr_db: float, rng: np.random.Generator) -> SensorBatch:
    """Add white Gaussian noise at ``snr_db`` relative to each sample's mean-square signal."""
    if np.isposinf(snr_db):
        return replace(batch, x=batch.x.copy())
    if not np.isfinite(snr_db):
        raise ContractError(f"snr must be finite or +inf, got {snr_db}")
    power = np.mean(batch.x**2, axis=0)
    noise_std = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    x = batch.x + rng.normal(size=batch.x.shape) * noise_std
    b = x.shape[1]
    return replace(batch, x=x, snr_db=np.full(b, float(snr_db)), damaged=np.ones(b, dtype=bool))


def inject_failure(batch: SensorBatch, mode: str) -> SensorBatch:
    """Hard failures: ``dead`` (all zeros) or ``stuck`` (every sample frozen at the first one)."""
    b = batch.x.shape[1]
    if mode == "dead":
        x = np.zeros_like(batch.x)
    elif mode == "stuck":
        x = np.repeat(batch.x[:, :1], b, axis=1)
    else:
        raise ContractError(f"unknown failure mode {mode!r}")
    return replace(batch, x=x, snr_db=np.full(b, -np.inf), damaged=np.ones(b, dtype=bool))


# ---------------------------------------------------------------- persistence


def save_dataset(path: str | Path, cfg: ScenarioConfig, splits: dict[str, list[SensorBatch]]) -> None:
    arrays = []
    for split, batches in splits.items():
        arrays.append((f"{split}.labels", batches[0].labels))
        arrays.append((f"{split}.latent", batches[0].true_latent))
        for l, b in enumerate(batches):
            arrays.append((f"{split}.x{l}", b.x))
    meta = {"kind": "dataset", "config": asdict(cfg), "seed": cfg.seed, "splits": list(splits)}
    write_container(path, meta, arrays)


def load_dataset(path: str | Path) -> tuple[ScenarioConfig, dict[str, list[SensorBatch]]]:
    meta, arrays = read_container(path)
    if meta.get("kind") != "dataset":
        raise ContractError(f"{path} is not a dataset")
    cfg = ScenarioConfig(**meta["config"])
    splits = {}
    for split in meta["splits"]:
        labels, latent = arrays[f"{split}.labels"], arrays[f"{split}.latent"]
        splits[split] = [SensorBatch(arrays[f"{split}.x{l}"], labels.copy(), latent.copy())
                         for l in range(cfg.modalities)]
    return cfg, splits


# ---------------------------------------------------------------- toy shapes


@dataclass(frozen=True)
class ShapeDistribution:
    kind: str  # circle | disk | square
    eps: float = 0.05  # half-width of the disk band in squared radius

    def __post_init__(self):
        if self.kind not in ("circle", "disk", "square"):
            raise ContractError(f"unknown shape {self.kind!r}")
        if self.kind == "disk" and not 0 < self.eps < 1:
            raise ContractError("disk eps must lie in (0, 1)")


def sample_shape(dist: ShapeDistribution, n: int, seed: int) -> np.ndarray:
    """``n x 2`` uniform samples. The square is ``[0, 1]^2``; the disk is the band ``x^2+y^2 in [1-eps, 1+eps]``."""
    if n <= 0:
        raise ContractError("n must be positive")
    rng = _rng(seed, 7)
    if dist.kind == "square":
        return rng.uniform(0.0, 1.0, size=(n, 2))
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    if dist.kind == "circle":
        r = np.ones(n)
    else:
        r = np.sqrt(rng.uniform(1.0 - dist.eps, 1.0 + dist.eps, size=n))  # uniform in area
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    if dist.kind == "circle":
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return pts


def coverage_fraction(points: np.ndarray, k: int = 10) -> float:
    """Fraction of the ``k x k`` cells of the unit square holding at least one point."""
    if k < 2:
        raise ContractError("grid needs k >= 2")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    inside = np.all((pts >= 0.0) & (pts <= 1.0), axis=1)
    cells = np.minimum((pts[inside] * k).astype(int), k - 1)
    occupied = np.unique(cells[:, 0] * k + cells[:, 1])
    return occupied.size / (k * k)
