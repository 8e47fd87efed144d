"""Figure rendering for the reporting paths.

Every figure is a byproduct of a delimited artifact that remains the
canonical output: the heatmap PNG mirrors the heatmap CSV, the curve PNG
mirrors the training log, the metrics PNG mirrors the metrics JSON.
Rendering uses the Agg backend and never requires a display.
"""

import json
import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import PositionHeatmap
from .training import MetricsReport


def _atomic_savefig(fig, path) -> None:
    """Render to a sibling temp file and move it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".png.tmp")
    os.close(fd)
    try:
        fig.savefig(tmp, format="png", dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


def render_heatmap(heatmap: PositionHeatmap, path) -> None:
    """Start-position x duration occupancy, percentages per cell."""
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(heatmap.bins, origin="lower", cmap="viridis", aspect="auto")
    b = heatmap.bins.shape[0]
    ax.set_xlabel("normalized start position bin")
    ax.set_ylabel("normalized duration bin")
    ax.set_xticks(range(b), [f"{i / b:.1f}" for i in range(b)])
    ax.set_yticks(range(b), [f"{i / b:.1f}" for i in range(b)])
    ax.set_title(f"moment position distribution ({heatmap.count} annotations)")
    fig.colorbar(im, ax=ax, label="% of annotations")
    _atomic_savefig(fig, path)


def render_training_curves(log_path, path) -> None:
    """Per-step loss components beside per-epoch IoU metrics."""
    steps, epochs = [], []
    with open(log_path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            (steps if "step" in rec else epochs).append(rec)
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(11, 4))
    if steps:
        xs = [r["step"] for r in steps]
        for key in ("span", "qgh", "rec", "align", "total"):
            ys = [r[key] for r in steps if key in r]
            if ys:
                ax_loss.plot(xs[: len(ys)], ys, label=key, linewidth=1)
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(fontsize=8)
        ax_loss.set_title("loss components")
    if epochs:
        xe = [r["epoch"] for r in epochs]
        for key in ("iou@0.3", "iou@0.5", "iou@0.7", "miou"):
            ax_metric.plot(xe, [r[key] for r in epochs], label=key, linewidth=1)
        ax_metric.set_xlabel("epoch")
        ax_metric.set_ylabel("percent")
        ax_metric.set_ylim(0, 100)
        ax_metric.legend(fontsize=8)
        ax_metric.set_title("validation metrics")
    _atomic_savefig(fig, path)


def render_metrics(report: MetricsReport, path) -> None:
    """Bar chart of IoU@mu plus mIoU."""
    labels = [f"IoU@{mu:g}" for mu in sorted(report.iou_at)] + ["mIoU"]
    values = [report.iou_at[mu] for mu in sorted(report.iou_at)] + [report.miou]
    fig, ax = plt.subplots(figsize=(5, 4))
    bars = ax.bar(labels, values, color="tab:blue")
    ax.bar_label(bars, fmt="%.1f", fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel("percent")
    ax.set_title(f"evaluation over {report.n} samples")
    _atomic_savefig(fig, path)
