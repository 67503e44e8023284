"""Self-contained SVG plots, rendered directly so runs stay dependency-free.

Output is deterministic: identical series produce identical bytes, since every
coordinate is printed with a fixed format and nothing (fonts, ids, timestamps)
is environment-dependent.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["Series", "render_plot", "emit_plot"]

WIDTH = 640
HEIGHT = 420
MARGIN_LEFT = 64
MARGIN_RIGHT = 18
MARGIN_TOP = 34
MARGIN_BOTTOM = 48

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_FONT = "font-family=\"Helvetica,Arial,sans-serif\""


class Series:
    """One named curve: equal-length x and y sequences, all finite."""

    def __init__(self, name, x, y):
        self.name = str(name)
        self.x = np.asarray(x, dtype=np.float64).reshape(-1)
        self.y = np.asarray(y, dtype=np.float64).reshape(-1)
        if self.x.shape[0] == 0:
            raise ValueError(f"series {self.name!r} is empty")
        if self.x.shape != self.y.shape:
            raise ValueError(f"series {self.name!r}: x has {self.x.shape[0]} "
                             f"points but y has {self.y.shape[0]}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError(f"series {self.name!r} contains non-finite values")


def _coerce_series(series):
    out = []
    for item in series:
        if isinstance(item, Series):
            out.append(item)
        else:
            name, xs, ys = item
            out.append(Series(name, xs, ys))
    if not out:
        raise ValueError("at least one series is required")
    return out


def _limits(values):
    lo = float(values.min())
    hi = float(values.max())
    if lo == hi:
        pad = 1.0 if lo == 0.0 else abs(lo) * 0.1
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def _ticks(lo, hi, count=5):
    """Round tick positions covering [lo, hi]: a 1/2/2.5/5 x 10^n step."""
    span = hi - lo
    raw = span / max(count - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * mag
        if step >= raw:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + step * 1e-9:
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return ticks


def _fmt_tick(v):
    return f"{v:.6g}"


def _fmt_px(v):
    return f"{v:.2f}"


def _escape(text):
    return (text.replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;").replace('"', "&quot;"))


def render_plot(series, style="line", title="", x_label="", y_label=""):
    """Render named (x, y) sequences to an SVG string.

    ``style`` is ``line`` (one polyline per series) or ``scatter`` (circles).
    Inputs may be ``Series`` objects or ``(name, xs, ys)`` tuples.
    """
    if style not in ("line", "scatter"):
        raise ValueError("style must be 'line' or 'scatter'")
    series = _coerce_series(series)

    all_x = np.concatenate([s.x for s in series])
    all_y = np.concatenate([s.y for s in series])
    x_lo, x_hi = _limits(all_x)
    y_lo, y_hi = _limits(all_y)

    px_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    px_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def sx(v):
        return MARGIN_LEFT + (v - x_lo) / (x_hi - x_lo) * px_w

    def sy(v):
        return HEIGHT - MARGIN_BOTTOM - (v - y_lo) / (y_hi - y_lo) * px_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
    ]
    axis_color = "#333333"
    grid_color = "#dddddd"

    for t in _ticks(x_lo, x_hi):
        px = sx(t)
        parts.append(f'<line x1="{_fmt_px(px)}" y1="{MARGIN_TOP}" '
                     f'x2="{_fmt_px(px)}" y2="{HEIGHT - MARGIN_BOTTOM}" '
                     f'stroke="{grid_color}" stroke-width="1"/>')
        parts.append(f'<text x="{_fmt_px(px)}" y="{HEIGHT - MARGIN_BOTTOM + 18}" '
                     f'text-anchor="middle" font-size="12" {_FONT} '
                     f'fill="{axis_color}">{_fmt_tick(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        py = sy(t)
        parts.append(f'<line x1="{MARGIN_LEFT}" y1="{_fmt_px(py)}" '
                     f'x2="{WIDTH - MARGIN_RIGHT}" y2="{_fmt_px(py)}" '
                     f'stroke="{grid_color}" stroke-width="1"/>')
        parts.append(f'<text x="{MARGIN_LEFT - 8}" y="{_fmt_px(py + 4)}" '
                     f'text-anchor="end" font-size="12" {_FONT} '
                     f'fill="{axis_color}">{_fmt_tick(t)}</text>')

    parts.append(f'<line x1="{MARGIN_LEFT}" y1="{HEIGHT - MARGIN_BOTTOM}" '
                 f'x2="{WIDTH - MARGIN_RIGHT}" y2="{HEIGHT - MARGIN_BOTTOM}" '
                 f'stroke="{axis_color}" stroke-width="1.5"/>')
    parts.append(f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" '
                 f'x2="{MARGIN_LEFT}" y2="{HEIGHT - MARGIN_BOTTOM}" '
                 f'stroke="{axis_color}" stroke-width="1.5"/>')

    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = [(sx(xv), sy(yv)) for xv, yv in zip(s.x, s.y)]
        if style == "line":
            coords = " ".join(f"{_fmt_px(px)},{_fmt_px(py)}" for px, py in pts)
            parts.append(f'<polyline points="{coords}" fill="none" '
                         f'stroke="{color}" stroke-width="2"/>')
        for px, py in pts:
            parts.append(f'<circle cx="{_fmt_px(px)}" cy="{_fmt_px(py)}" '
                         f'r="3" fill="{color}"/>')

    if title:
        parts.append(f'<text x="{WIDTH // 2}" y="20" text-anchor="middle" '
                     f'font-size="15" {_FONT} fill="#000000">'
                     f'{_escape(title)}</text>')
    if x_label:
        parts.append(f'<text x="{MARGIN_LEFT + px_w // 2}" y="{HEIGHT - 10}" '
                     f'text-anchor="middle" font-size="13" {_FONT} '
                     f'fill="{axis_color}">{_escape(x_label)}</text>')
    if y_label:
        cy = MARGIN_TOP + px_h // 2
        parts.append(f'<text x="16" y="{cy}" text-anchor="middle" '
                     f'font-size="13" {_FONT} fill="{axis_color}" '
                     f'transform="rotate(-90 16 {cy})">{_escape(y_label)}</text>')

    legend_x = MARGIN_LEFT + 12
    legend_y = MARGIN_TOP + 10
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        y = legend_y + 18 * i
        parts.append(f'<rect x="{legend_x}" y="{y - 9}" width="12" height="12" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{legend_x + 18}" y="{y + 2}" font-size="12" '
                     f'{_FONT} fill="#000000">{_escape(s.name)}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_plot(series, style, path, title="", x_label="", y_label=""):
    """Render and write an SVG; returns the path."""
    text = render_plot(series, style=style, title=title,
                       x_label=x_label, y_label=y_label)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path
