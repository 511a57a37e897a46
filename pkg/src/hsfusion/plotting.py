"""SVG figures for training histories, robustness sweeps and the toy shape study.

Plots are written with matplotlib's SVG backend; the element-id
salt and the date stamp are pinned so identical data give identical files.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "hsfusion",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "figure.dpi": 100,
}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def training_panels(path: str | Path, epochs: Sequence[int], losses: dict[str, Sequence[float]],
                    pairwise_dist: Sequence[float], acc: Sequence[Sequence[float]]) -> None:
    """Three panels: loss terms, summed pairwise hidden distance, per-modality training accuracy."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
        for name, values in losses.items():
            axes[0].plot(epochs, values, label=name)
        axes[0].set_title("optimization losses")
        axes[0].set_xlabel("epoch")
        if losses:
            axes[0].legend(fontsize=7)
        axes[1].plot(epochs, pairwise_dist, color="k")
        axes[1].set_title("sum of pairwise hidden distances")
        axes[1].set_xlabel("epoch")
        acc = np.asarray(acc, dtype=float).reshape(len(epochs), -1)
        for l in range(acc.shape[1]):
            axes[2].plot(epochs, acc[:, l], label=f"modality {l + 1}")
        axes[2].set_title("training accuracy")
        axes[2].set_xlabel("epoch")
        axes[2].set_ylim(0.0, 1.02)
        if acc.shape[1]:
            axes[2].legend(fontsize=7)
        fig.tight_layout()
        _save(fig, path)


def _snr_positions(snrs: Sequence[float]) -> tuple[np.ndarray, float | None]:
    finite = [s for s in snrs if math.isfinite(s)]
    clean_at = (max(finite) + 10.0) if finite else 0.0
    pos = np.array([s if math.isfinite(s) else clean_at for s in snrs], dtype=float)
    return pos, (clean_at if any(not math.isfinite(s) for s in snrs) else None)


def accuracy_vs_snr(path: str | Path, curves: dict[str, dict[str, list[tuple[float, float]]]]) -> None:
    """``curves[damaged_set][method] = [(snr_db, accuracy), ...]``; one panel per damaged set."""
    panels = list(curves)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(len(panels), 1), figsize=(4.2 * max(len(panels), 1), 3.6), squeeze=False)
        for ax, key in zip(axes[0], panels):
            clean_at = None
            for method, pts in curves[key].items():
                pos, c = _snr_positions([p[0] for p in pts])
                clean_at = c if c is not None else clean_at
                order = np.argsort(pos, kind="stable")
                style = "-o" if method.startswith("proposed") else "--"
                ax.plot(pos[order], np.array([p[1] for p in pts])[order], style, markersize=3, label=method)
            ax.set_title(f"damaged: {key}")
            ax.set_xlabel("SNR (dB)")
            ax.set_ylabel("accuracy")
            ax.set_ylim(0.0, 1.02)
            if clean_at is not None:
                ticks = [t for t in ax.get_xticks() if t < clean_at - 5] + [clean_at]
                ax.set_xticks(ticks)
                ax.set_xticklabels([f"{t:g}" for t in ticks[:-1]] + ["clean"])
        if panels:
            axes[0][-1].legend(fontsize=6, loc="lower right")
        fig.tight_layout()
        _save(fig, path)


def shape_scatter(path: str | Path, source: np.ndarray, generated: np.ndarray, target: np.ndarray,
                  title: str) -> None:
    """Source samples, generated samples and target samples side by side."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
        for ax, pts, name, color in zip(axes, (source, generated, target), ("source", "generated", "target"),
                                        ("tab:gray", "tab:blue", "tab:green")):
            ax.scatter(pts[:, 0], pts[:, 1], s=2, color=color)
            ax.set_title(name)
            ax.set_aspect("equal", adjustable="datalim")
        fig.suptitle(title)
        fig.tight_layout()
        _save(fig, path)
