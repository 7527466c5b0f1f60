"""Dependency-free SVG line charts for round curves."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

PANEL_W, PANEL_H = 320, 240
MARGIN = 40


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _panel(x0: float, title: str, xs: Sequence[float], ys: Sequence[float | None]) -> list[str]:
    out = [f'<g transform="translate({x0},0)">',
           f'<rect x="0" y="0" width="{PANEL_W}" height="{PANEL_H}" fill="white" stroke="#ccc"/>',
           f'<text x="{PANEL_W / 2}" y="16" text-anchor="middle" font-size="12">{escape(title)}</text>']
    pts = [(x, y) for x, y in zip(xs, ys) if y is not None and math.isfinite(y)]
    if not pts:
        out.append(f'<text x="{PANEL_W / 2}" y="{PANEL_H / 2}" text-anchor="middle" font-size="11">n/a</text>')
        out.append("</g>")
        return out
    xmin, xmax = min(p[0] for p in pts), max(p[0] for p in pts)
    ymin, ymax = min(p[1] for p in pts), max(p[1] for p in pts)
    if xmax == xmin:
        xmax = xmin + 1
    if ymax == ymin:
        ymax = ymin + 1
    w, h = PANEL_W - 2 * MARGIN, PANEL_H - 2 * MARGIN

    def sx(x):
        return MARGIN + (x - xmin) / (xmax - xmin) * w

    def sy(y):
        return MARGIN + h - (y - ymin) / (ymax - ymin) * h

    path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
    out += [
        f'<line x1="{MARGIN}" y1="{MARGIN + h}" x2="{MARGIN + w}" y2="{MARGIN + h}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{MARGIN + h}" stroke="black"/>',
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{path}"/>',
        f'<text x="{MARGIN}" y="{PANEL_H - 10}" font-size="10">{_fmt(xmin)}</text>',
        f'<text x="{MARGIN + w}" y="{PANEL_H - 10}" font-size="10" text-anchor="end">{_fmt(xmax)}</text>',
        f'<text x="{MARGIN - 4}" y="{MARGIN + h}" font-size="10" text-anchor="end">{_fmt(ymin)}</text>',
        f'<text x="{MARGIN - 4}" y="{MARGIN + 8}" font-size="10" text-anchor="end">{_fmt(ymax)}</text>',
        f'<text x="{PANEL_W / 2}" y="{PANEL_H - 10}" font-size="10" text-anchor="middle">round</text>',
        "</g>",
    ]
    return out


def write_panels(path: str | Path, xs: Sequence[float], panels: dict[str, Sequence[float | None]]) -> Path:
    """Write one SVG with a row of line-chart panels sharing the x axis."""
    width = PANEL_W * len(panels)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" '
             f'viewBox="0 0 {width} {PANEL_H}" font-family="sans-serif">']
    for i, (title, ys) in enumerate(panels.items()):
        parts += _panel(i * PANEL_W, title, xs, ys)
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
