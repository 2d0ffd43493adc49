"""Trajectory figures: predicted azimuth/elevation with +-2 sigma bands over ground truth, as SVG."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .csvio import PredictionGrid
from .frontend import CHUNK_MS, frame_centers

WIDTH, PANEL_H, MARGIN = 900, 260, 60
SLOT_COLORS = ("#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf")
TRAJECTORY_HEADER = ("time_s", "slot", "gamma", "azimuth_rad", "azimuth_lo", "azimuth_hi",
                     "elevation_rad", "elevation_lo", "elevation_hi")


def frame_times(num_chunks: int, frames_per_chunk: int) -> np.ndarray:
    return np.concatenate([frame_centers(m * CHUNK_MS / 1000.0, frames_per_chunk) for m in range(num_chunks)])


def trajectory_table(grid: PredictionGrid):
    """Per (frame, slot): time, activity, angles and +-2 sigma bounds from the marginal variances."""
    M, K, N = grid.shape
    t = frame_times(M, K)
    gamma, doa, cov = grid.flat()
    sd_a = np.sqrt(np.maximum(cov[..., 0, 0], 0.0))
    sd_e = np.sqrt(np.maximum(cov[..., 1, 1], 0.0))
    rows = []
    for f in range(M * K):
        for n in range(N):
            a, e = doa[f, n]
            rows.append((t[f], n, gamma[f, n], a, a - 2 * sd_a[f, n], a + 2 * sd_a[f, n],
                         e, e - 2 * sd_e[f, n], e + 2 * sd_e[f, n]))
    return rows


def write_trajectory_csv(path: str | Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for r in rows:
            w.writerow([repr(float(r[0])), r[1]] + [repr(float(v)) for v in r[2:]])


def _segments(mask: np.ndarray):
    """Start/stop index pairs of the runs of True in ``mask``."""
    edges = np.diff(np.concatenate([[0], mask.astype(int), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def render_svg(grid: PredictionGrid, events, threshold: float = 0.5) -> str:
    M, K, N = grid.shape
    t = frame_times(M, K)
    gamma, doa, cov = grid.flat()
    t_max = max(float(t[-1]) + 0.02, 1e-3)
    plot_w = WIDTH - 2 * MARGIN
    panels = [("azimuth (rad)", 0, -math.pi, math.pi), ("elevation (rad)", 1, -math.pi / 2, math.pi / 2)]
    height = len(panels) * (PANEL_H + MARGIN) + MARGIN
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
           f'viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{height}" fill="white"/>']

    for p, (label, axis, lo, hi) in enumerate(panels):
        top = MARGIN + p * (PANEL_H + MARGIN)

        def px(x):
            return MARGIN + plot_w * x / t_max

        def py(y):
            y = min(max(y, lo), hi)
            return top + PANEL_H * (hi - y) / (hi - lo)

        out.append(f'<rect x="{MARGIN}" y="{top}" width="{plot_w}" height="{PANEL_H}" fill="none" stroke="#444"/>')
        out.append(f'<text x="{MARGIN}" y="{top - 8}">{escape(label)}</text>')
        for tick in (lo, 0.0, hi):
            out.append(f'<text x="{MARGIN - 6}" y="{py(tick) + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
        out.append(f'<text x="{MARGIN + plot_w}" y="{top + PANEL_H + 16}" text-anchor="end">{t_max:.1f} s</text>')
        for n in range(N):
            color = SLOT_COLORS[n % len(SLOT_COLORS)]
            sd = np.sqrt(np.maximum(cov[:, n, axis, axis], 0.0))
            mid = doa[:, n, axis]
            for a, b in _segments(gamma[:, n] > threshold):
                xs = [px(x) for x in t[a:b]]
                upper = [f"{x:.1f},{py(y):.1f}" for x, y in zip(xs, mid[a:b] + 2 * sd[a:b])]
                lower = [f"{x:.1f},{py(y):.1f}" for x, y in zip(xs[::-1], (mid[a:b] - 2 * sd[a:b])[::-1])]
                out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.25" '
                           f'stroke="none"/>')
                line = " ".join(f"{x:.1f},{py(y):.1f}" for x, y in zip(xs, mid[a:b]))
                out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for ev in events:
            value = ev.azimuth if axis == 0 else ev.elevation
            x0, x1 = px(min(ev.onset, t_max)), px(min(ev.offset, t_max))
            out.append(f'<line x1="{x0:.1f}" y1="{py(value):.1f}" x2="{x1:.1f}" y2="{py(value):.1f}" '
                       f'stroke="black" stroke-width="2" stroke-dasharray="6,3"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_trajectories(grid: PredictionGrid, events, svg_path: str | Path) -> tuple[Path, Path]:
    """Write the SVG and a sidecar CSV (``<stem>.trajectory.csv``) with the plotted values."""
    svg_path = Path(svg_path)
    csv_path = svg_path.with_suffix(".trajectory.csv")
    svg_path.write_text(render_svg(grid, events), encoding="utf-8")
    write_trajectory_csv(csv_path, trajectory_table(grid))
    return svg_path, csv_path
