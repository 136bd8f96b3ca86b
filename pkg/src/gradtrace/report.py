"""Minimal SVG line charts for trace CSVs (no plotting dependency)."""

from __future__ import annotations

import math
from html import escape
from typing import Sequence

PALETTE = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939",
]

WIDTH, HEIGHT = 760, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 250, 30, 50


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    ticks, t = [], start
    while t <= hi + 1e-12 * abs(step):
        ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def render_svg(rows: Sequence[tuple[int, str, float]], title: str = "") -> str:
    """One polyline per metric, x = step, y = value."""
    series: dict[str, list[tuple[int, float]]] = {}
    for step, metric, value in rows:
        series.setdefault(metric, []).append((step, value))
    for pts in series.values():
        pts.sort()

    xs = [s for pts in series.values() for s, _ in pts] or [0]
    ys = [v for pts in series.values() for _, v in pts if math.isfinite(v)] or [0.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys + [0.0]), max(ys + [0.0])
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN_T + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{MARGIN_L}" y="18" font-size="13">{escape(title)}</text>')
    # axes
    out.append(
        f'<g class="axes" stroke="black" fill="none">'
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T + ph}" x2="{MARGIN_L + pw}" y2="{MARGIN_T + ph}"/>'
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{MARGIN_T + ph}"/></g>'
    )
    for t in _nice_ticks(x0, x1):
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{MARGIN_T + ph}" x2="{x:.2f}" y2="{MARGIN_T + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{MARGIN_T + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _nice_ticks(y0, y1):
        y = py(t)
        out.append(f'<line x1="{MARGIN_L - 4}" y1="{y:.2f}" x2="{MARGIN_L}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    if y0 < 0 < y1:
        out.append(
            f'<line x1="{MARGIN_L}" y1="{py(0):.2f}" x2="{MARGIN_L + pw}" y2="{py(0):.2f}" '
            f'stroke="#999" stroke-dasharray="3,3"/>'
        )
    out.append(f'<text x="{MARGIN_L + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">step</text>')

    for k, (metric, pts) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{px(s):.2f},{py(v):.2f}" for s, v in pts if math.isfinite(v))
        out.append(
            f'<polyline class="series" data-metric="{escape(metric)}" points="{coords}" '
            f'fill="none" stroke="{color}" stroke-width="1.6"/>'
        )
        ly = MARGIN_T + 14 + 16 * k
        lx = MARGIN_L + pw + 14
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{lx + 24}" y="{ly}">{escape(metric)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
