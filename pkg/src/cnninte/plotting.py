"""Raster figures (matplotlib) written next to the text reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .interpret import SEPARATED, InterpretationTrace  # noqa: E402

TRUE_COLOR = "#d62728"
HYPO_COLOR = "#1f77b4"
PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)
    return path


def plot_training_loss(losses, path, window: int = 50):
    losses = np.asarray(losses, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(losses) + 1), losses, color="0.75", lw=0.8, label="step loss")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(window, len(losses) + 1), smooth, color="k", lw=1.5, label=f"{window}-step mean")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("cross-entropy")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_factor_sweep(results: dict, path, cnn_accuracy: float | None = None):
    """results: {n_factors: meta accuracy}."""
    ks = sorted(results)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ks, [results[k] for k in ks], "o-", color="k")
    if cnn_accuracy is not None:
        ax.axhline(cnn_accuracy, color=TRUE_COLOR, ls="--", lw=1, label="CNN test accuracy")
        ax.legend(frameon=False)
    ax.set_xlabel("factors (K)")
    ax.set_ylabel("meta test accuracy")
    ax.set_xticks(ks)
    fig.tight_layout()
    return _save(fig, path)


def plot_trace(trace: InterpretationTrace, path, max_rows: int = 5):
    n_cols = len(trace.columns)
    n_rows = max(1, min(max_rows, max(len(c.steps) for c in trace.columns)))
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.7 * n_cols, 1.6 * n_rows + 0.6), squeeze=False)
    for ax in axes.ravel():
        ax.set_axis_off()
    for c, col in enumerate(trace.columns):
        axes[0, c].set_title(f"Hypothesis: {col.hypothesis}", fontsize=8)
        for r, step in enumerate(col.steps[:n_rows]):
            ax = axes[r, c]
            ax.set_axis_on()
            ax.set_xticks([])
            ax.set_yticks([])
            if len(step.points_true):
                ax.scatter(*step.points_true.T, s=2, c=TRUE_COLOR, lw=0)
            if len(step.points_hypo):
                ax.scatter(*step.points_hypo.T, s=2, c=HYPO_COLOR, lw=0)
            if r == len(col.steps) - 1:
                color = "#2ca02c" if col.verdict == SEPARATED else TRUE_COLOR
                for spine in ax.spines.values():
                    spine.set_edgecolor(color)
                    spine.set_linewidth(2)
            if c == 0 or r >= len(trace.columns[0].steps):
                f, thr, op = step.condition
                ax.set_ylabel(f"f{f} {op} {thr:g}", fontsize=7)
    fig.suptitle(f"instance {trace.instance_index}: true {trace.true_class}, predicted {trace.predicted_class}",
                 fontsize=10)
    fig.tight_layout()
    return _save(fig, path)
