"""Dependency-free SVG fan charts: context line, empirical forecast bands,
optional ground truth. One stacked panel per node."""
from __future__ import annotations

from pathlib import Path

import numpy as np

PANEL_W = 640
PANEL_H = 120
MARGIN = 36
GAP = 14


def _scale(lo, hi):
    if hi - lo < 1e-9:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.08 * (hi - lo)
    return lo - pad, hi + pad


def _poly(xs, ys, color, width=1.2, dash=None):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline fill="none" stroke="{color}" '
            f'stroke-width="{width}"{dash_attr} points="{pts}"/>')


def _band(xs, lo, hi, color, opacity):
    fwd = [f"{x:.2f},{y:.2f}" for x, y in zip(xs, lo)]
    back = [f"{x:.2f},{y:.2f}" for x, y in zip(xs[::-1], hi[::-1])]
    return (f'<polygon fill="{color}" fill-opacity="{opacity}" '
            f'stroke="none" points="{" ".join(fwd + back)}"/>')


def write_forecast_svg(path, context: np.ndarray, bands: dict,
                       median: np.ndarray, truth: np.ndarray | None = None,
                       title: str = "") -> None:
    """context [K, C]; bands level -> (lo [K, H], hi [K, H]); median [K, H]."""
    context = np.asarray(context, dtype=float)
    median = np.asarray(median, dtype=float)
    k, c = context.shape
    h = median.shape[1]
    total_w = PANEL_W + 2 * MARGIN
    total_h = MARGIN + k * (PANEL_H + GAP) + MARGIN

    def x_px(t):
        return MARGIN + PANEL_W * t / max(c + h - 1, 1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" '
        f'height="{total_h}" font-family="sans-serif" font-size="11">',
        f'<text x="{MARGIN}" y="{MARGIN - 18}" font-size="14">{title}</text>',
    ]
    sorted_levels = sorted(bands, reverse=True)  # widest band drawn first
    for i in range(k):
        top = MARGIN + i * (PANEL_H + GAP)
        series = [context[i], median[i]]
        for lo, hi in bands.values():
            series += [lo[i], hi[i]]
        if truth is not None:
            series.append(truth[i])
        lo_v, hi_v = _scale(min(s.min() for s in series),
                            max(s.max() for s in series))

        def y_px(v):
            frac = (v - lo_v) / (hi_v - lo_v)
            return top + PANEL_H * (1.0 - frac)

        parts.append(
            f'<rect x="{MARGIN}" y="{top}" width="{PANEL_W}" '
            f'height="{PANEL_H}" fill="none" stroke="#ccc"/>'
        )
        parts.append(
            f'<text x="{MARGIN + 4}" y="{top + 13}" fill="#555">node {i}</text>'
        )
        split_x = x_px(c - 1)
        parts.append(_poly([split_x, split_x], [top, top + PANEL_H],
                           "#999", 0.8, dash="3,3"))

        ctx_x = [x_px(t) for t in range(c)]
        parts.append(_poly(ctx_x, [y_px(v) for v in context[i]], "#333"))

        fut_x = [x_px(c - 1 + t + 1) for t in range(h)]
        for level in sorted_levels:
            lo, hi = bands[level]
            opacity = 0.18 if level == max(sorted_levels) else 0.30
            parts.append(_band(fut_x, [y_px(v) for v in lo[i]],
                               [y_px(v) for v in hi[i]], "#3b6fb6", opacity))
        parts.append(_poly(fut_x, [y_px(v) for v in median[i]], "#1f7a33", 1.5))
        if truth is not None:
            parts.append(_poly(fut_x, [y_px(v) for v in truth[i]],
                               "#e08214", 1.5))
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
