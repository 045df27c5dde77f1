"""Deterministic histogram and correlation emitters (CSV + SVG)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import AnalysisFrame, raw_values
from .errors import ConfigError

WIDTH, HEIGHT = 800, 600
_PAD = 60


def histogram(values, bins: int, value_range: tuple[float, float] | None = None) -> tuple[np.ndarray, np.ndarray]:
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigError("cannot histogram an empty vector")
    counts, edges = np.histogram(v, bins=bins, range=value_range)
    return counts, edges


def _num(v: float) -> str:
    return f"{v:.3f}"


def render_svg(counts: np.ndarray, edges: np.ndarray, marker: float | None = None, title: str = "") -> str:
    lo, hi = float(edges[0]), float(edges[-1])
    span = hi - lo if hi > lo else 1.0
    top = max(int(counts.max()), 1)
    plot_w = WIDTH - 2 * _PAD
    plot_h = HEIGHT - 2 * _PAD

    def sx(v: float) -> float:
        return _PAD + (v - lo) / span * plot_w

    def sy(c: float) -> float:
        return HEIGHT - _PAD - c / top * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        safe = title.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        parts.append(f'<text x="{WIDTH // 2}" y="30" text-anchor="middle" font-size="16">{safe}</text>')
    for c, a, b in zip(counts.tolist(), edges[:-1].tolist(), edges[1:].tolist()):
        x0, x1 = sx(a), sx(b)
        parts.append(
            f'<rect class="bar" x="{_num(x0)}" y="{_num(sy(c))}" width="{_num(x1 - x0)}" '
            f'height="{_num(sy(0) - sy(c))}" fill="#4c72b0" stroke="white" stroke-width="0.5"/>'
        )
    base = HEIGHT - _PAD
    parts.append(f'<line class="axis" x1="{_PAD}" y1="{base}" x2="{WIDTH - _PAD}" y2="{base}" stroke="black"/>')
    parts.append(f'<line class="axis" x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{base}" stroke="black"/>')
    for v, anchor in ((lo, "start"), (hi, "end")):
        parts.append(f'<text x="{_num(sx(v))}" y="{base + 20}" text-anchor="{anchor}" font-size="12">{v:.4g}</text>')
    parts.append(f'<text x="{_PAD - 8}" y="{_PAD + 4}" text-anchor="end" font-size="12">{top}</text>')
    if marker is not None and np.isfinite(marker):
        mx = _num(sx(float(marker)))
        parts.append(f'<line class="marker" x1="{mx}" y1="{_PAD}" x2="{mx}" y2="{base}" stroke="#dd8452" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_histogram_csv(counts: np.ndarray, edges: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["bin_lo", "bin_hi", "count"])
        for a, b, c in zip(edges[:-1].tolist(), edges[1:].tolist(), counts.tolist()):
            out.writerow([repr(a), repr(b), c])


def emit_histogram(
    values,
    bins: int,
    path: str | Path,
    marker: float | None = None,
    value_range: tuple[float, float] | None = None,
    title: str = "",
) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.svg``; returns both paths."""
    counts, edges = histogram(values, bins, value_range)
    stem = Path(path)
    if stem.suffix in (".csv", ".svg"):
        stem = stem.with_suffix("")
    csv_path = stem.with_name(stem.name + ".csv")
    svg_path = stem.with_name(stem.name + ".svg")
    write_histogram_csv(counts, edges, csv_path)
    svg_path.write_text(render_svg(counts, edges, marker, title))
    return csv_path, svg_path


def correlation(M: np.ndarray) -> np.ndarray:
    """Pearson correlation of the columns of M, exactly symmetric with a unit diagonal."""
    if M.shape[1] < 2:
        raise ConfigError("correlation matrix needs >= 2 columns")
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.corrcoef(M, rowvar=False)
    r = (r + r.T) / 2.0
    np.fill_diagonal(r, 1.0)
    return r


def correlation_matrix(frame: AnalysisFrame, cols: Sequence[str]) -> np.ndarray:
    return correlation(np.column_stack([raw_values(frame, c) for c in cols]) if cols else np.zeros((frame.rows, 0)))


def write_correlation_csv(r: np.ndarray, cols: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["", *cols])
        for name, row in zip(cols, r.tolist()):
            out.writerow([name, *(repr(v) for v in row)])


def emit_correlation_matrix(frame: AnalysisFrame, cols: Sequence[str], path: str | Path) -> np.ndarray:
    r = correlation_matrix(frame, cols)
    write_correlation_csv(r, cols, path)
    return r
