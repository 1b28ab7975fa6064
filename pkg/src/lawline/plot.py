"""Static SVG rendering of loss-to-loss curves with their checkpoint scatter.

Hand-written SVG keeps output byte-identical across runs and machines.
"""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 360
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 16, 32, 48
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-12 * span:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _num(v: float) -> str:
    return f"{v:.2f}"


def render_svg(
    title: str,
    x_label: str,
    y_label: str,
    series: Sequence[dict],
) -> str:
    """Render curves and scatter to SVG.

    Each entry of ``series`` has ``name``, ``curve`` (list of ``[x, y]``) and ``scatter``
    (list of ``[x, y]``); either list may be empty.
    """
    xs = [p[0] for s in series for key in ("curve", "scatter") for p in s.get(key, [])]
    ys = [p[1] for s in series for key in ("curve", "scatter") for p in s.get(key, [])]
    if xs:
        x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 <= x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad_x, pad_y = 0.04 * (x1 - x0), 0.04 * (y1 - y0)
    x0, x1, y0, y1 = x0 - pad_x, x1 + pad_x, y0 - pad_y, y1 + pad_y
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B

    def sx(x: float) -> float:
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def sy(y: float) -> float:
        return MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for t in _nice_ticks(x0, x1):
        px = sx(t)
        out.append(f'<line x1="{_num(px)}" y1="{MARGIN_T + ph}" x2="{_num(px)}" y2="{MARGIN_T + ph + 4}" stroke="#333"/>')
        out.append(f'<text x="{_num(px)}" y="{MARGIN_T + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in _nice_ticks(y0, y1):
        py = sy(t)
        out.append(f'<line x1="{MARGIN_L - 4}" y1="{_num(py)}" x2="{MARGIN_L}" y2="{_num(py)}" stroke="#333"/>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{_num(py + 4)}" text-anchor="end">{t:g}</text>')
    out.append(
        f'<text x="{MARGIN_L + pw / 2:.0f}" y="{HEIGHT - 8}" text-anchor="middle">{escape(x_label)}</text>'
    )
    out.append(
        f'<text x="14" y="{MARGIN_T + ph / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {MARGIN_T + ph / 2:.0f})">{escape(y_label)}</text>'
    )
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        for x, y in s.get("scatter", []):
            out.append(f'<circle cx="{_num(sx(x))}" cy="{_num(sy(y))}" r="2" fill="{color}" fill-opacity="0.5"/>')
        curve = s.get("curve", [])
        if curve:
            pts = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in curve)
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN_T + 14 + 14 * i
        out.append(f'<rect x="{MARGIN_L + 8}" y="{ly - 8}" width="10" height="3" fill="{color}"/>')
        out.append(f'<text x="{MARGIN_L + 22}" y="{ly - 4}">{escape(s.get("name", ""))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
