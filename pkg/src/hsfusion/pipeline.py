"""End-to-end runs: simulate, train, calibrate, evaluate.

Every step writes plain CSV (floats in shortest round-trip form) plus SVG
figures into an output directory, together with the resolved configuration.
Runs are deterministic for a fixed seed: all randomness is drawn from
Philox streams keyed by the seed and a purpose tag.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, plotting
from .config import RunConfig, dump_config
from .errors import NumericError, ShapeError
from .failure import (
    DamageDetector,
    adaptive_doc,
    calibrate_threshold,
    reconstruct_features,
)
from .fusion import SensorReport, decide, estimate_rho, fuse_reports
from .nets import ModelBundle, init_params, load_bundle, save_bundle
from .objective import Optimizers, TrainState, train_epoch
from .simdata import ScenarioConfig, SensorBatch, generate_scenario, inject_noise, load_dataset, save_dataset

log = logging.getLogger(__name__)

DATASET_FILE = "dataset.hsfc"
CHECKPOINT_FILE = "checkpoint.hsfc"
TRAIN_CSV = "train_loss.csv"
EVAL_CSV = "eval.csv"
ASSESS_CSV = "assessments.csv"
CALIB_CSV = "calibration.csv"
CONFIG_ECHO = "config.resolved.ini"

EVAL_HEADER = ["method", "snr_db", "damaged", "accuracy", "mean_doc_f", "detect_tpr", "detect_fpr", "rho", "seed"]
ASSESS_HEADER = ["snr_db", "damaged", "sample", "modality", "p_d", "threshold", "flagged", "detector"]
CALIB_HEADER = ["detector", "snr_db", "threshold", "youden_j", "tpr", "fpr", "low_confidence", "rule"]

_NOISE_STREAM = 31


class TrainingDiverged(NumericError):
    """A non-finite value appeared during training; the last good state was checkpointed."""

    def __init__(self, epoch: int, checkpoint: Path, cause: Exception):
        super().__init__(f"non-finite value in epoch {epoch}: {cause}; last good checkpoint at {checkpoint}")
        self.epoch = epoch
        self.checkpoint = checkpoint


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _prepare(out: str | Path, cfg: RunConfig) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(dump_config(cfg), encoding="utf-8")
    return out


# ---------------------------------------------------------------- simulate


def simulate(cfg: RunConfig, out: str | Path) -> Path:
    out = _prepare(out, cfg)
    splits = {"train": generate_scenario(cfg.scenario, "train"), "test": generate_scenario(cfg.scenario, "test")}
    path = out / DATASET_FILE
    save_dataset(path, cfg.scenario, splits)
    return path


def load_data(path: str | Path, cfg: RunConfig | None = None) -> tuple[ScenarioConfig, dict[str, list[SensorBatch]]]:
    scen, splits = load_dataset(path)
    if cfg is not None and (tuple(scen.input_dims) != tuple(cfg.scenario.input_dims)
                            or scen.classes != cfg.scenario.classes):
        raise ShapeError(f"dataset dims {scen.input_dims} x {scen.classes} classes do not match the "
                         f"configured {cfg.scenario.input_dims} x {cfg.scenario.classes}")
    return scen, splits


# ---------------------------------------------------------------- train


_HISTORY = ("wasserstein", "commutation", "linf1", "xent", "pairwise_dist")


def _history_arrays(state: TrainState, n_mod: int) -> list[tuple[str, np.ndarray]]:
    out = [(f"hist.{k}", np.asarray(getattr(state, k), dtype=float)) for k in _HISTORY]
    out.append(("hist.acc", np.asarray(state.acc, dtype=float).reshape(len(state.acc), n_mod)))
    return out


def _history_from_arrays(arrays: dict[str, np.ndarray]) -> TrainState:
    state = TrainState()
    if "hist.acc" not in arrays:
        return state
    for k in _HISTORY:
        setattr(state, k, [float(v) for v in arrays[f"hist.{k}"]])
    state.acc = [[float(v) for v in row] for row in arrays["hist.acc"]]
    state.epoch = len(state.wasserstein)
    return state


def save_checkpoint(path: Path, cfg: RunConfig, bundle: ModelBundle, state: TrainState, opt: Optimizers) -> None:
    save_bundle(path, bundle, extra={"optimizer": opt.kind},
                extra_arrays=_history_arrays(state, bundle.n_modalities) + opt.state_arrays())


def load_checkpoint(path: str | Path, cfg: RunConfig) -> tuple[ModelBundle, TrainState, Optimizers]:
    bundle, extra, arrays = load_bundle(path)
    if tuple(bundle.sizes.input_dims) != tuple(cfg.scenario.input_dims):
        raise ShapeError(f"checkpoint input dims {bundle.sizes.input_dims} != configured {cfg.scenario.input_dims}")
    opt = Optimizers(bundle.n_modalities, cfg.loss, extra.get("optimizer", cfg.train.optimizer))
    opt.load_state_arrays(arrays)
    return bundle, _history_from_arrays(arrays), opt


def train(cfg: RunConfig, dataset: str | Path, out: str | Path, resume: str | Path | None = None,
          plots: bool = True) -> tuple[ModelBundle, TrainState]:
    """Train to ``cfg.train.epochs`` total epochs, optionally continuing a checkpoint."""
    out = _prepare(out, cfg)
    _, splits = load_data(dataset, cfg)
    batches = splits["train"]
    if resume is not None:
        bundle, state, opt = load_checkpoint(resume, cfg)
    else:
        bundle = init_params(cfg.net_sizes(), cfg.seed, clamp=cfg.loss.clamp_box)
        state, opt = TrainState(), Optimizers(len(batches), cfg.loss, cfg.train.optimizer)
    path = out / CHECKPOINT_FILE
    while bundle.epoch < cfg.train.epochs:
        good = ([p.data.copy() for p in bundle.all_params()], opt.state_arrays(), bundle.acc_train)
        try:
            train_epoch(bundle, batches, cfg.loss, state, cfg.train.batch_size, opt, cfg.train.selection_step)
        except NumericError as exc:
            for p, d in zip(bundle.all_params(), good[0]):
                p.data[...] = d
            opt.load_state_arrays(dict(good[1]))
            bundle.acc_train = good[2]
            save_checkpoint(path, cfg, bundle, state, opt)
            raise TrainingDiverged(bundle.epoch + 1, path, exc) from exc
        log.info("epoch %d acc %s", bundle.epoch, state.acc[-1])
    save_checkpoint(path, cfg, bundle, state, opt)
    write_csv(out / TRAIN_CSV, state.csv_header(bundle.n_modalities), state.csv_rows())
    if plots and state.wasserstein:
        epochs = list(range(1, len(state.wasserstein) + 1))
        losses = {"wasserstein": state.wasserstein, "commutation": state.commutation,
                  "linf1": state.linf1, "cross-entropy": state.xent}
        plotting.training_panels(out / "train_panels.svg", epochs, losses, state.pairwise_dist, state.acc)
    return bundle, state


# ---------------------------------------------------------------- calibrate


def calibrate(cfg: RunConfig, bundle: ModelBundle, train_batches: Sequence[SensorBatch],
              out: str | Path | None = None) -> DamageDetector:
    f = cfg.failure
    det = calibrate_threshold(bundle, train_batches, f.calib_snr_grid, cfg.seed, f.linkage, f.fit_fraction,
                              f.max_points, f.clean_quantile, f.min_j, f.track_quantile)
    if out is not None:
        out = _prepare(out, cfg)
        rows = [["clustering", e.snr_db, e.threshold, e.youden_j, e.tpr, e.fpr, int(e.low_confidence), e.rule]
                for e in det.table.entries]
        nan = float("nan")
        rows.append(["tracking", nan, det.track_threshold, nan, nan, det.track_fpr, 0, "clean_quantile"])
        write_csv(out / CALIB_CSV, CALIB_HEADER, rows)
    return det


# ---------------------------------------------------------------- evaluate


@dataclass
class CellResult:
    rows: list[list]
    assessments: list[list]


def damaged_label(group: Sequence[int]) -> str:
    return "+".join(str(m + 1) for m in group)


def corrupt(test: Sequence[SensorBatch], group: Sequence[int], snr_db: float, seed: int, cell: int) -> list[SensorBatch]:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _NOISE_STREAM, cell])))
    out = list(test)
    for m in group:
        out[m] = inject_noise(test[m], snr_db, rng)
    return out


def _accuracy(decisions: Sequence[int | None], y: np.ndarray) -> float:
    return float(np.mean([d is not None and d == t for d, t in zip(decisions, y)]))


def proposed_reports(bundle: ModelBundle, detector: DamageDetector | None, hs: list[np.ndarray],
                     xs: list[np.ndarray], mode: str = "prior", kind: str = "clustering"):
    """Per-sample sensor reports for the proposed fusion.

    ``prior``: ``DoC = Acc_train``.  ``adaptive``: ``DoC = (1 - p_D) * Acc_train``
    with each sensor's own probabilities.  ``reconstruct``: adaptive DoC, and
    flagged sensors classify features rebuilt from the surviving sensors'
    hidden estimates (DoC 0 when nothing survives).  The tracking detector has
    no ``p_D``; its verdict stands in as 0 or 1.  Returns
    ``(reports_per_sample, assessments)``.
    """
    if mode not in ("prior", "adaptive", "reconstruct"):
        raise ValueError(f"unknown mode {mode!r}")
    n_mod, n = len(hs), hs[0].shape[1]
    acc = np.asarray(bundle.acc_train, dtype=float)
    probs = [bundle.probabilities(l, hs[l]) for l in range(n_mod)]
    if mode == "prior":
        return [[SensorReport(probs[l][:, k], float(acc[l]), l) for l in range(n_mod)] for k in range(n)], None
    assess = detector.assess(hs, xs) if kind == "clustering" else detector.track(hs)
    reports = []
    for k, a in enumerate(assess):
        p_d = a.p_d if kind == "clustering" else a.damaged.astype(float)
        docs = np.array([adaptive_doc(float(p_d[l]), float(acc[l])) for l in range(n_mod)])
        row = []
        for l in range(n_mod):
            pl, doc = probs[l][:, k], docs[l]
            if mode == "reconstruct" and a.damaged[l]:
                survivors = [(hs[m][:, k], docs[m]) for m in range(n_mod) if not a.damaged[m]]
                f = reconstruct_features(bundle.selections[l], survivors)
                if f is None:
                    doc = 0.0
                else:
                    pl = bundle.features_probabilities(l, f[:, None])[:, 0]
            row.append(SensorReport(pl, float(doc), l))
        reports.append(row)
    return reports, assess


def evaluate_cell(cfg: RunConfig, bundle: ModelBundle, detector: DamageDetector | None,
                  concat: baselines.ConcatClassifier | None, test: Sequence[SensorBatch],
                  group: Sequence[int], snr_db: float, cell: int, rho: float | None = None) -> CellResult:
    methods = cfg.evaluate.methods
    batches = corrupt(test, group, snr_db, cfg.seed, cell)
    n_mod = len(batches)
    y = batches[0].y
    xs = [b.x for b in batches]
    hs = [bundle.hidden(l, xs[l]) for l in range(n_mod)]
    probs = [bundle.probabilities(l, hs[l]) for l in range(n_mod)]
    label = damaged_label(group)
    nan = float("nan")
    rows, assess_rows = [], []

    rho = cfg.fusion.rho if rho is None else rho
    renorm = cfg.fusion.renormalize

    def row(method, acc, doc=nan, tpr=nan, fpr=nan):
        rows.append([method, float(snr_db), label, acc, doc, tpr, fpr, rho, cfg.seed])

    if "single" in methods:
        for l in range(n_mod):
            row(f"single_{l + 1}", float(np.mean(probs[l].argmax(axis=0) == y)))
    if "concat" in methods and concat is not None:
        row("concat", float(np.mean(concat.predict_proba(xs).argmax(axis=0) == y)))
    per_sample = [[SensorReport(probs[l][:, k], 1.0, l) for l in range(n_mod)] for k in range(y.size)]
    w = baselines.BaselineWeights.from_accuracies(bundle.acc_train)
    if "similar" in methods:
        row("similar", _accuracy([int(np.argmax(baselines.similar_fusion(r, w).probs)) for r in per_sample], y))
    if "dissimilar" in methods:
        row("dissimilar", _accuracy([int(np.argmax(baselines.dissimilar_fusion(r, w).probs)) for r in per_sample], y))
    if "dempster_shafer" in methods:
        out = [baselines.dempster_shafer(r) for r in per_sample]
        row("dempster_shafer", _accuracy([None if o is None else int(np.argmax(o.probs)) for o in out], y))
    if "proposed_prior" in methods:
        reports, _ = proposed_reports(bundle, detector, hs, xs, "prior")
        fused = [fuse_reports(r, rho, renorm) for r in reports]
        row("proposed_prior", _accuracy([decide(f) for f in fused], y), float(np.mean([f.doc for f in fused])))
    kind = cfg.failure.detector
    for mode in ("adaptive", "reconstruct"):
        if f"proposed_{mode}" not in methods or detector is None:
            continue
        reports, assess = proposed_reports(bundle, detector, hs, xs, mode, kind)
        fused = [fuse_reports(r, rho, renorm) for r in reports]
        flags = np.stack([a.damaged for a in assess], axis=1)  # L x B
        bad = np.zeros(n_mod, dtype=bool)
        if math.isfinite(snr_db):
            bad[list(group)] = True
        tpr = float(flags[bad].mean()) if bad.any() else nan
        fpr = float(flags[~bad].mean()) if (~bad).any() else nan
        row(f"proposed_{mode}", _accuracy([decide(f) for f in fused], y), float(np.mean([f.doc for f in fused])),
            tpr, fpr)
        if mode == "adaptive" or "proposed_adaptive" not in methods:
            for k, a in enumerate(assess):
                for l in range(n_mod):
                    assess_rows.append([float(snr_db), label, k, l + 1, float(a.p_d[l]), float(a.threshold[l]),
                                        int(a.damaged[l]), a.detector])
    return CellResult(rows, assess_rows)


def fusion_rho(cfg: RunConfig, bundle: ModelBundle, train_batches: Sequence[SensorBatch]) -> float:
    """Configured rho, or the estimate from clean training predictions when ``estimate_rho`` is set."""
    if not cfg.fusion.estimate_rho:
        return cfg.fusion.rho
    probs = [bundle.probabilities(l, bundle.hidden(l, b.x)) for l, b in enumerate(train_batches)]
    rho = estimate_rho(probs)
    log.info("rho estimated from training predictions: %r", rho)
    return rho


def evaluate(cfg: RunConfig, checkpoint: str | Path, dataset: str | Path, out: str | Path,
             plots: bool = True, assessments: bool = True) -> list[list]:
    """Robustness sweep over every (damaged set, SNR) cell; writes the evaluation CSV and figure."""
    out = _prepare(out, cfg)
    _, splits = load_data(dataset, cfg)
    bundle, _, _ = load_checkpoint(checkpoint, cfg)
    train_b, test_b = splits["train"], splits["test"]
    if len(test_b) != bundle.n_modalities:
        raise ShapeError(f"dataset has {len(test_b)} modalities, checkpoint {bundle.n_modalities}")
    if not bundle.acc_train:
        bundle.acc_train = [float(np.mean(bundle.probabilities(l, bundle.hidden(l, train_b[l].x)).argmax(0)
                                          == train_b[l].y)) for l in range(bundle.n_modalities)]
    cells = [(g, s) for g in cfg.evaluate.damaged_sets for s in cfg.evaluate.snr_grid]
    rows, assess_rows = [], []
    if cells:
        adaptive = {"proposed_adaptive", "proposed_reconstruct"} & set(cfg.evaluate.methods)
        detector = calibrate(cfg, bundle, train_b, out) if adaptive else None
        rho = fusion_rho(cfg, bundle, train_b)
        concat = None
        if "concat" in cfg.evaluate.methods:
            concat = baselines.train_concat([b.x for b in train_b], train_b[0].labels, cfg.seed,
                                            epochs=cfg.evaluate.concat_epochs)
        for cell, (group, snr) in enumerate(cells):
            res = evaluate_cell(cfg, bundle, detector, concat, test_b, group, snr, cell, rho)
            rows += res.rows
            assess_rows += res.assessments
    write_csv(out / EVAL_CSV, EVAL_HEADER, rows)
    if assessments:
        write_csv(out / ASSESS_CSV, ASSESS_HEADER, assess_rows)
    if plots and rows:
        curves: dict[str, dict[str, list]] = {}
        for r in rows:
            curves.setdefault(r[2], {}).setdefault(r[0], []).append((r[1], r[3]))
        plotting.accuracy_vs_snr(out / "accuracy_vs_snr.svg", curves)
    return rows


def with_epochs(cfg: RunConfig, epochs: int) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, epochs=epochs))
