"""Dataset diagnostics: length statistics and the positional heatmap.

The normalized moment length is the mean of per-annotation ratios
(moment / its own video), not the ratio of the two means; published
per-dataset tables are only consistent with the per-sample definition.

The heatmap bins each annotation by (normalized start, normalized
duration).  Since start + duration <= 1, cells above the anti-diagonal are
infeasible; boundary values that floor exactly onto the anti-diagonal are
clamped into the feasible triangle so the emptiness invariant is
unconditional (a full-video moment lands at (start 0, duration B-1)).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Annotation, _atomic_write_bytes

DEFAULT_BINS = 10


@dataclass
class DatasetStats:
    mean_video_len_s: float
    mean_moment_len_s: float
    mean_normalized_moment_len: float
    count: int


@dataclass
class PositionHeatmap:
    """bins[d, s] = percentage of annotations with duration bin d, start bin s."""

    bins: np.ndarray
    count: int


def dataset_stats(annotations: list[Annotation]) -> DatasetStats:
    """Mean video length (per unique video), moment length and ratio (per annotation)."""
    if not annotations:
        raise ValueError("dataset_stats: no annotations")
    by_video: dict[str, float] = {}
    for a in annotations:
        by_video[a.video_id] = a.duration_s
    moment_lens = [a.end_s - a.start_s for a in annotations]
    ratios = [(a.end_s - a.start_s) / a.duration_s for a in annotations]
    # fsum is exactly rounded, making the means permutation-invariant
    return DatasetStats(
        mean_video_len_s=math.fsum(by_video.values()) / len(by_video),
        mean_moment_len_s=math.fsum(moment_lens) / len(moment_lens),
        mean_normalized_moment_len=math.fsum(ratios) / len(ratios),
        count=len(annotations),
    )


def heatmap_cell(start_norm: float, dur_norm: float, B: int) -> tuple[int, int]:
    """(start bin, duration bin) with the duration clamped into the feasible triangle."""
    s_bin = min(max(int(math.floor(start_norm * B)), 0), B - 1)
    d_bin = min(max(int(math.floor(dur_norm * B)), 0), B - 1)
    d_bin = min(d_bin, B - 1 - s_bin)
    return s_bin, d_bin


def position_heatmap(annotations: list[Annotation], B: int = DEFAULT_BINS) -> PositionHeatmap:
    """Percentage grid over (normalized start, normalized duration)."""
    if not annotations:
        raise ValueError("position_heatmap: no annotations")
    if B < 1:
        raise ValueError(f"position_heatmap: need B >= 1, got {B}")
    grid = np.zeros((B, B), dtype=np.float64)
    for a in annotations:
        s_bin, d_bin = heatmap_cell(a.start_s / a.duration_s, (a.end_s - a.start_s) / a.duration_s, B)
        grid[d_bin, s_bin] += 1.0
    grid *= 100.0 / len(annotations)
    return PositionHeatmap(bins=grid, count=len(annotations))


def uniformity_score(heatmap: PositionHeatmap) -> float:
    """Normalized entropy of the occupied cells: 0 = single cell, 1 = flat."""
    mass = heatmap.bins[heatmap.bins > 0] / 100.0
    if mass.size <= 1:
        return 0.0
    entropy = float(-(mass * np.log(mass)).sum())
    return entropy / math.log(mass.size)


def stats_to_csv(stats: DatasetStats) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["count", "mean_video_len_s", "mean_moment_len_s", "mean_normalized_moment_len"])
    w.writerow(
        [
            stats.count,
            repr(stats.mean_video_len_s),
            repr(stats.mean_moment_len_s),
            repr(stats.mean_normalized_moment_len),
        ]
    )
    return buf.getvalue()


def heatmap_to_csv(heatmap: PositionHeatmap) -> str:
    """Metadata line, then one CSV row per duration bin (ascending)."""
    B = heatmap.bins.shape[0]
    lines = [f"# bins={B} samples={heatmap.count}"]
    for d in range(B):
        lines.append(",".join(repr(float(v)) for v in heatmap.bins[d]))
    return "\n".join(lines) + "\n"


def write_stats_csv(stats: DatasetStats, path) -> None:
    _atomic_write_bytes(Path(path), stats_to_csv(stats).encode("utf-8"))


def write_heatmap_csv(heatmap: PositionHeatmap, path) -> None:
    _atomic_write_bytes(Path(path), heatmap_to_csv(heatmap).encode("utf-8"))
