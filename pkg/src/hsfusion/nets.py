"""Generators, selection matrices, linear classifiers and the multi-head critic.

Each modality ``l`` owns a generator ``G^l = Z^l o M^l`` (a dense relu body
``M^l`` followed by a square, bias-free linear map ``Z^l``), a selection
matrix ``S^l`` pulling ``d`` features out of the ``d_H``-dimensional hidden
estimate, and a softmax classifier over those features.  One critic with an
``L``-wide head scores hidden estimates for every modality at once.

Data is column-major throughout: a batch of ``B`` observations of a
``d_l``-dimensional sensor is a ``d_l x B`` matrix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import ContractError, ShapeError
from .tensor import Tensor

INACTIVE_EPS = 1e-4
PAPER_HIDDEN_DIM = 500  # best hidden size reported for the seismic/acoustic/imaging data


@dataclass(frozen=True)
class NetSizes:
    input_dims: tuple[int, ...]
    n_classes: int
    hidden_dim: int = 32
    feature_dim: int = 16
    gen_width: int = 64
    gen_layers: int = 5  # dense layers in M^l; Z^l is the sixth
    critic_width: int = 32
    critic_layers: int = 2  # relu trunk layers before the L-wide head

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        ints = [*self.input_dims, self.n_classes, self.hidden_dim, self.feature_dim, self.gen_width,
                self.gen_layers, self.critic_width]
        if any(v <= 0 for v in ints) or self.critic_layers < 0:
            raise ContractError(f"network sizes must be positive: {self}")

    @property
    def n_modalities(self) -> int:
        return len(self.input_dims)


@dataclass
class Dense:
    w: Tensor  # out x in
    b: Tensor  # out

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_colvec(self.w @ x, self.b)

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass
class GeneratorNet:
    m_layers: list[Dense]
    z_matrix: Tensor

    def __post_init__(self):
        d_h = self.z_matrix.shape[0]
        if self.z_matrix.data.ndim != 2 or self.z_matrix.shape != (d_h, d_h):
            raise ShapeError(f"Z must be square, got {self.z_matrix.shape}")
        if self.m_layers[-1].w.shape[0] != d_h:
            raise ShapeError("output of M must match the size of Z")

    @property
    def input_dim(self) -> int:
        return self.m_layers[0].w.shape[1]

    def body(self, x: Tensor) -> Tensor:
        """``M^l(x)``: relu between layers, linear output."""
        h = x
        last = len(self.m_layers) - 1
        for i, layer in enumerate(self.m_layers):
            h = layer(h)
            if i < last:
                h = T.relu(h)
        return h

    def params(self) -> list[Tensor]:
        return [p for layer in self.m_layers for p in layer.params()] + [self.z_matrix]


@dataclass
class SelectionMatrix:
    s: Tensor  # d x d_H

    def inactive_columns(self, eps: float = INACTIVE_EPS) -> np.ndarray:
        """Indices of hidden coordinates this modality ignores."""
        return np.flatnonzero(np.max(np.abs(self.s.data), axis=0) < eps)


@dataclass
class LinearClassifier:
    w: Tensor  # I x d
    b: Tensor  # I

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass
class CriticNet:
    trunk: list[Dense]
    head: Dense  # -> L scores

    def params(self) -> list[Tensor]:
        return [p for layer in self.trunk for p in layer.params()] + self.head.params()


def generate(g: GeneratorNet, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != g.input_dim:
        raise ShapeError(f"generator expects {g.input_dim} input rows, got shape {x.shape}")
    return g.z_matrix @ g.body(x)


def select_features(s: SelectionMatrix, h: Tensor) -> Tensor:
    return T.matmul(s.s, h)


def logits(c: LinearClassifier, f: Tensor) -> Tensor:
    return T.add_colvec(c.w @ f, c.b)


def classify(c: LinearClassifier, f: Tensor) -> Tensor:
    """Softmax object probabilities, one column per sample."""
    return T.softmax_cols(logits(c, f))


def critic_scores(dnet: CriticNet, h: Tensor) -> Tensor:
    """Raw per-modality scores, ``L x B``."""
    if h.data.ndim != 2 or h.shape[0] != (dnet.trunk[0].w.shape[1] if dnet.trunk else dnet.head.w.shape[1]):
        raise ShapeError(f"critic input has shape {h.shape}")
    z = h
    for layer in dnet.trunk:
        z = T.relu(layer(z))
    return dnet.head(z)


@dataclass
class ModelBundle:
    """Every learned matrix plus the settings needed to rebuild and resume."""

    sizes: NetSizes
    generators: list[GeneratorNet]
    selections: list[SelectionMatrix]
    classifiers: list[LinearClassifier]
    critic: CriticNet
    seed: int
    epoch: int = 0
    hyper: dict[str, float] = field(default_factory=dict)
    acc_train: list[float] = field(default_factory=list)

    @property
    def n_modalities(self) -> int:
        return len(self.generators)

    def modality_params(self, l: int) -> list[Tensor]:
        """Classifier, selection, Z and body parameters of modality ``l``."""
        return self.classifiers[l].params() + [self.selections[l].s] + self.generators[l].params()

    def all_params(self) -> list[Tensor]:
        out = []
        for l in range(self.n_modalities):
            out += self.modality_params(l)
        return out + self.critic.params()

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(p.name, p.data) for p in self.all_params()]

    def hidden(self, l: int, x: np.ndarray) -> np.ndarray:
        """Hidden estimate of modality ``l`` for raw observations, no graph recorded."""
        with T.no_grad():
            return generate(self.generators[l], Tensor(x)).data

    def probabilities(self, l: int, h: np.ndarray) -> np.ndarray:
        with T.no_grad():
            f = select_features(self.selections[l], Tensor(h))
            return classify(self.classifiers[l], f).data

    def features_probabilities(self, l: int, f: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return classify(self.classifiers[l], Tensor(f)).data


def _dense(rng: np.random.Generator, n_in: int, n_out: int, name: str) -> Dense:
    w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
    return Dense(Tensor(w, True, f"{name}.w"), Tensor(np.zeros(n_out), True, f"{name}.b"))


def init_params(sizes: NetSizes, seed: int, clamp: float = 0.01) -> ModelBundle:
    """Seeded initialization.

    Dense weights ~ N(0, 2/fan_in) with zero biases; ``Z^l = I + N(0, 0.01^2)``
    so the commutation penalty starts near zero; ``S^l ~ N(0, 1/d_H)``.
    Critic parameters are clamped into ``[-clamp, clamp]`` straight away.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    d_h, d_f, n_cls = sizes.hidden_dim, sizes.feature_dim, sizes.n_classes
    gens, sels, clfs = [], [], []
    for l, d_in in enumerate(sizes.input_dims):
        widths = [d_in] + [sizes.gen_width] * (sizes.gen_layers - 1) + [d_h]
        layers = [_dense(rng, a, b, f"g{l}.m{i}") for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        z = np.eye(d_h) + rng.normal(0.0, 0.01, size=(d_h, d_h))
        gens.append(GeneratorNet(layers, Tensor(z, True, f"g{l}.z")))
        sels.append(SelectionMatrix(Tensor(rng.normal(0.0, np.sqrt(1.0 / d_h), size=(d_f, d_h)), True, f"s{l}")))
        c = _dense(rng, d_f, n_cls, f"c{l}")
        clfs.append(LinearClassifier(c.w, c.b))
    widths = [d_h] + [sizes.critic_width] * sizes.critic_layers
    trunk = [_dense(rng, a, b, f"d.t{i}") for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
    head = _dense(rng, widths[-1], sizes.n_modalities, "d.head")
    critic = CriticNet(trunk, head)
    for p in critic.params():
        T.clamp_(p, -clamp, clamp)
    return ModelBundle(sizes, gens, sels, clfs, critic, seed)


def save_bundle(path: str | Path, bundle: ModelBundle, extra: dict | None = None,
                extra_arrays: list[tuple[str, np.ndarray]] | None = None) -> None:
    meta = {
        "kind": "checkpoint",
        "sizes": asdict(bundle.sizes),
        "seed": bundle.seed,
        "epoch": bundle.epoch,
        "hyper": bundle.hyper,
        "acc_train": bundle.acc_train,
        "extra": extra or {},
    }
    write_container(path, meta, bundle.named_arrays() + list(extra_arrays or []))


def load_bundle(path: str | Path) -> tuple[ModelBundle, dict, dict[str, np.ndarray]]:
    """Return ``(bundle, extra_meta, leftover_arrays)``."""
    meta, arrays = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ContractError(f"{path} is not a checkpoint")
    sizes = NetSizes(**{**meta["sizes"], "input_dims": tuple(meta["sizes"]["input_dims"])})
    bundle = init_params(sizes, meta["seed"])
    for p in bundle.all_params():
        stored = arrays.pop(p.name)
        if stored.shape != p.shape:
            raise ShapeError(f"checkpoint matrix {p.name} has shape {stored.shape}, expected {p.shape}")
        p.data[...] = stored
    bundle.epoch = meta["epoch"]
    bundle.hyper = dict(meta["hyper"])
    bundle.acc_train = list(meta["acc_train"])
    return bundle, meta["extra"], arrays
