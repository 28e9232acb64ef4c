"""Minimal standalone SVG line plots with byte-stable output."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 50
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _fmt(v):
    return f"{v:.2f}"


def _tick_label(v):
    return f"{v:.3g}"


def _bounds(values, log):
    vals = [math.log10(v) for v in values if v > 0] if log else list(values)
    vals = [v for v in vals if math.isfinite(v)]
    if not vals:
        return None
    lo, hi = min(vals), max(vals)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def line_plot(series, title, xlabel="", ylabel="", log=True):
    """SVG text for ``series``: a dict name -> (x list, y list).

    Log axes drop non-positive points.  An empty dict gives bare axes with the
    title.  A legend is drawn when there is more than one series.
    """
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv]
    bx = _bounds(xs, log)
    by = _bounds(ys, log)
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">'
        f"{escape(title)}</text>",
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12">{escape(xlabel)}</text>',
        f'<text x="16" y="{TOP + ph / 2:.2f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {TOP + ph / 2:.2f})">{escape(ylabel)}</text>',
    ]
    if bx is not None and by is not None:
        def px(v):
            t = math.log10(v) if log else v
            return LEFT + (t - bx[0]) / (bx[1] - bx[0]) * pw

        def py(v):
            t = math.log10(v) if log else v
            return TOP + ph - (t - by[0]) / (by[1] - by[0]) * ph

        for lo, hi, axis in ((bx[0], bx[1], "x"), (by[0], by[1], "y")):
            for i in range(5):
                t = lo + (hi - lo) * i / 4
                label = _tick_label(10 ** t if log else t)
                if axis == "x":
                    xpos = LEFT + pw * i / 4
                    out.append(f'<text x="{_fmt(xpos)}" y="{TOP + ph + 16}" text-anchor="middle" '
                               f'font-family="sans-serif" font-size="10">{label}</text>')
                else:
                    ypos = TOP + ph - ph * i / 4
                    out.append(f'<text x="{LEFT - 6}" y="{_fmt(ypos + 3)}" text-anchor="end" '
                               f'font-family="sans-serif" font-size="10">{label}</text>')
        for n, (name, (xv, yv)) in enumerate(series.items()):
            color = COLORS[n % len(COLORS)]
            pts = [(x, y) for x, y in zip(xv, yv)
                   if math.isfinite(x) and math.isfinite(y) and (not log or (x > 0 and y > 0))]
            if not pts:
                continue
            coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            for x, y in pts:
                out.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" fill="{color}"/>')
    if len(series) > 1:
        for n, name in enumerate(series):
            color = COLORS[n % len(COLORS)]
            y = TOP + 14 + 16 * n
            out.append(f'<line x1="{LEFT + 10}" y1="{y - 4}" x2="{LEFT + 28}" y2="{y - 4}" stroke="{color}" '
                       f'stroke-width="1.5"/>')
            out.append(f'<text x="{LEFT + 34}" y="{y}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plot(path, series, title, xlabel="", ylabel="", log=True):
    with open(path, "w", newline="\n") as fh:
        fh.write(line_plot(series, title, xlabel, ylabel, log))
