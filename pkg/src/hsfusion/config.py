"""Typed INI run configuration.

Sections map onto dataclasses; every key is converted to the type of the
field's default, unknown sections and keys are rejected, and the resolved
configuration can be written back out for provenance.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError, ContractError
from .nets import NetSizes
from .objective import LossWeights
from .simdata import ScenarioConfig

REQUIRED = {"scenario": ("modalities", "classes", "input_dims")}


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    feature_dim: int = 16
    gen_width: int = 64
    gen_layers: int = 5
    critic_width: int = 32
    critic_layers: int = 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "sgd"
    selection_step: str = "prox"


@dataclass(frozen=True)
class FusionConfig:
    rho: float = 0.25
    renormalize: bool = False
    estimate_rho: bool = False


@dataclass(frozen=True)
class FailureConfig:
    detector: str = "clustering"
    linkage: str = "average"
    calib_snr_grid: tuple[float, ...] = (20.0, 10.0, 5.0, 0.0)
    fit_fraction: float = 0.75
    max_points: int = 5000
    clean_quantile: float = 0.95
    min_j: float = 0.2
    track_quantile: float = 0.95


@dataclass(frozen=True)
class EvaluateConfig:
    snr_grid: tuple[float, ...] = (math.inf, 20.0, 10.0, 5.0, 0.0)
    damaged_sets: tuple[tuple[int, ...], ...] = ((0,), (1,), (2,))
    methods: tuple[str, ...] = ("single", "concat", "similar", "dissimilar", "dempster_shafer",
                                "proposed_prior", "proposed_adaptive", "proposed_reconstruct")
    concat_epochs: int = 40


@dataclass(frozen=True)
class ToyConfig:
    n_samples: int = 2000
    iterations: int = 3000
    batch_size: int = 128
    width: int = 32
    critic_iters: int = 2
    rate: float = 2e-3
    clamp: float = 0.05  # wasserstein critic only
    eps: float = 0.5
    grid: int = 10
    loss: str = "logistic"
    optimizer: str = "adam"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    failure: FailureConfig = field(default_factory=FailureConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    toyshapes: ToyConfig = field(default_factory=ToyConfig)

    def net_sizes(self) -> NetSizes:
        m = self.model
        return NetSizes(self.scenario.input_dims, self.scenario.classes, m.hidden_dim, m.feature_dim,
                        m.gen_width, m.gen_layers, m.critic_width, m.critic_layers)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, scenario=replace(self.scenario, seed=seed))


SECTIONS = ("scenario", "model", "loss", "train", "fusion", "failure", "evaluate", "toyshapes")


# ---------------------------------------------------------------- value codecs


def _parse_float(s: str) -> float:
    s = s.strip().lower()
    if s in ("inf", "+inf", "infinity"):
        return math.inf
    return float(s)


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _items(s: str, sep: str = ",") -> list[str]:
    return [t.strip() for t in s.split(sep) if t.strip()]


def _convert(default: Any, raw: str) -> Any:
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return _parse_float(raw)
    if isinstance(default, str):
        return raw.strip()
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            return tuple(tuple(int(v) for v in _items(group, "+")) for group in _items(raw, ";"))
        if default and isinstance(default[0], str):
            return tuple(_items(raw))
        if default and isinstance(default[0], int) and not isinstance(default[0], bool):
            return tuple(int(v) for v in _items(raw))
        return tuple(_parse_float(v) for v in _items(raw))
    raise ConfigError(f"unsupported config type {type(default).__name__}")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) and value > 0 else repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join("+".join(str(v) for v in g) for g in value)
        return ", ".join(_format(v) for v in value)
    return str(value)


# ---------------------------------------------------------------- load / dump


def _section(cls_default: Any, section: str, items: dict[str, str]) -> Any:
    defaults = {f.name: getattr(cls_default, f.name) for f in fields(cls_default)}
    kwargs = {}
    for key, raw in items.items():
        if key not in defaults or (section == "scenario" and key == "seed"):
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        try:
            kwargs[key] = _convert(defaults[key], raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    try:
        return replace(cls_default, **kwargs)
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    """Parse and validate a run configuration; raises :class:`ConfigError`."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    for name in parser.sections():
        if name not in SECTIONS and name != "run":
            raise ConfigError(f"unknown section [{name}]")
    for name, keys in REQUIRED.items():
        for key in keys:
            if not parser.has_option(name, key):
                raise ConfigError(f"missing required key [{name}] {key}")
    run_items = dict(parser["run"]) if parser.has_section("run") else {}
    unknown = set(run_items) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in [run]")
    try:
        seed = int(run_items.get("seed", "0"))
    except ValueError as exc:
        raise ConfigError(f"[run] seed: {exc}") from exc

    base = RunConfig()
    parts = {}
    for name in SECTIONS:
        items = dict(parser[name]) if parser.has_section(name) else {}
        default = getattr(base, name)
        if name == "scenario" and "modalities" in items:
            default = _scenario_default(items)
        parts[name] = _section(default, name, items)
    if not parser.has_option("evaluate", "damaged_sets"):
        singles = tuple((m,) for m in range(parts["scenario"].modalities))
        parts["evaluate"] = replace(parts["evaluate"], damaged_sets=singles)
    cfg = RunConfig(seed=seed, **parts).with_seed(seed)
    validate(cfg)
    return cfg


def _scenario_default(items: dict[str, str]) -> ScenarioConfig:
    """Scenario defaults stretched to the configured number of modalities, so per-modality keys may be omitted."""
    try:
        n = int(items["modalities"])
    except ValueError as exc:
        raise ConfigError(f"[scenario] modalities: {exc}") from exc
    if n < 2:
        raise ConfigError("[scenario] fusion needs at least 2 modalities")
    d = ScenarioConfig()

    def stretch(t):
        return tuple(t[l % len(t)] for l in range(n))

    return ScenarioConfig(modalities=n, private_dims=stretch(d.private_dims), input_dims=stretch(d.input_dims),
                          sensor_noise=stretch(d.sensor_noise), latent_gain=stretch(d.latent_gain))


def validate(cfg: RunConfig) -> None:
    n = cfg.scenario.modalities
    if cfg.train.epochs < 0 or cfg.train.batch_size < 1:
        raise ConfigError("[train] epochs must be >= 0 and batch_size >= 1")
    if cfg.train.optimizer not in ("sgd", "adam"):
        raise ConfigError(f"[train] unknown optimizer {cfg.train.optimizer!r}")
    if cfg.train.selection_step not in ("prox", "subgradient"):
        raise ConfigError(f"[train] unknown selection_step {cfg.train.selection_step!r}")
    if not 0.0 <= cfg.fusion.rho <= 1.0:
        raise ConfigError("[fusion] rho must lie in [0, 1]")
    if cfg.failure.detector not in ("clustering", "tracking"):
        raise ConfigError(f"[failure] unknown detector {cfg.failure.detector!r}")
    if cfg.failure.linkage not in ("single", "average"):
        raise ConfigError(f"[failure] unknown linkage {cfg.failure.linkage!r}")
    if not 0.0 < cfg.failure.fit_fraction < 1.0:
        raise ConfigError("[failure] fit_fraction must lie in (0, 1)")
    for name in ("clean_quantile", "track_quantile"):
        if not 0.0 < getattr(cfg.failure, name) < 1.0:
            raise ConfigError(f"[failure] {name} must lie in (0, 1)")
    if not cfg.failure.calib_snr_grid:
        raise ConfigError("[failure] calib_snr_grid must not be empty")
    for group in cfg.evaluate.damaged_sets:
        if not group or any(not 0 <= m < n for m in group):
            raise ConfigError(f"[evaluate] damaged set {group} out of range for {n} modalities")
    known = set(EvaluateConfig().methods)
    for m in cfg.evaluate.methods:
        if m not in known:
            raise ConfigError(f"[evaluate] unknown method {m!r}")
    if cfg.toyshapes.loss not in ("logistic", "wasserstein"):
        raise ConfigError(f"[toyshapes] unknown loss {cfg.toyshapes.loss!r}")
    if cfg.toyshapes.optimizer not in ("adam", "rmsprop"):
        raise ConfigError(f"[toyshapes] unknown optimizer {cfg.toyshapes.optimizer!r}")
    if not 0.0 < cfg.toyshapes.eps < 1.0:
        raise ConfigError("[toyshapes] eps must lie in (0, 1)")
    try:
        cfg.net_sizes()
    except ContractError as exc:
        raise ConfigError(f"[model] {exc}") from exc


def dump_config(cfg: RunConfig) -> str:
    """Resolved configuration as INI text; ``load_config(text=dump_config(c)) == c``."""
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    for name in SECTIONS:
        part = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(part):
            if name == "scenario" and f.name == "seed":
                continue
            lines.append(f"{f.name} = {_format(getattr(part, f.name))}")
        lines.append("")
    return "\n".join(lines)
