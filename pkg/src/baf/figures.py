"""Render report figures to files: anchoring-score histogram and layer summary.

Uses the Agg backend; these are batch renders for the CLI report path, never
interactive windows.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .report import HISTOGRAM_BINS, FilterReport

BELOW_COLOR = "#c23b22"
ABOVE_COLOR = "#2a6fbb"
NULL_COLOR = "#2e8b57"


def render_figures(report: FilterReport, out_dir) -> list[Path]:
    """Write all report figures into a directory, returning the paths."""
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [
        render_anchoring_histogram(report, directory / "anchoring_hist.png"),
        render_layer_summary(report, directory / "layer_summary.png"),
    ]
    return paths


def render_anchoring_histogram(report: FilterReport, path) -> Path:
    """Stacked histogram of channel anchoring scores, split at each layer's null baseline.

    Channels below their own layer's baseline are drawn in red, the rest in
    blue; the dashed green line marks the median per-layer baseline.
    """
    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    below = np.zeros(HISTOGRAM_BINS)
    above = np.zeros(HISTOGRAM_BINS)
    nulls = []
    for lr in report.layers:
        nulls.append(lr.a_null)
        for sigma, anchoring, _gate in lr.channel_records:
            idx = min(int(anchoring * HISTOGRAM_BINS), HISTOGRAM_BINS - 1)
            if anchoring < lr.a_null:
                below[idx] += 1
            else:
                above[idx] += 1

    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    width = edges[1] - edges[0]
    ax.bar(edges[:-1], below, width=width, align="edge", color=BELOW_COLOR,
           label="below null baseline")
    ax.bar(edges[:-1], above, width=width, align="edge", bottom=below, color=ABOVE_COLOR,
           label="at or above baseline")
    if nulls:
        ax.axvline(float(np.median(nulls)), color=NULL_COLOR, linestyle="--",
                   label="median null baseline")
    ax.set_xlabel("anchoring score")
    ax.set_ylabel("channels")
    ax.set_xlim(0.0, 1.0)
    ax.set_title("Anchoring score distribution")
    ax.legend(frameon=False)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def render_layer_summary(report: FilterReport, path, max_layers: int = 40) -> Path:
    """Per-layer kept fraction and energy retention bars.

    Only the first max_layers layers (by name order) are drawn so the figure
    stays readable on large adapters.
    """
    layers = report.layers[:max_layers]
    names = [lr.layer_name for lr in layers]
    kept_frac = [lr.kept_count / lr.r if lr.r else 0.0 for lr in layers]
    energy_frac = [
        (lr.fro_norm_after / lr.fro_norm_before) ** 2 if lr.fro_norm_before > 0 else 0.0
        for lr in layers
    ]

    height = max(2.5, 0.35 * len(layers) + 1.5)
    fig, ax = plt.subplots(figsize=(8.0, height))
    y = np.arange(len(layers))
    ax.barh(y - 0.18, kept_frac, height=0.36, color=ABOVE_COLOR, label="channels kept")
    ax.barh(y + 0.18, energy_frac, height=0.36, color=NULL_COLOR, label="energy retained")
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlim(0.0, 1.05)
    ax.set_xlabel("fraction of input")
    title = "Per-layer filtering summary"
    if len(report.layers) > max_layers:
        title += f" (first {max_layers} of {len(report.layers)} layers)"
    ax.set_title(title)
    ax.legend(frameon=False, loc="lower right")
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out
