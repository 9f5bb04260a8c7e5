"""Tiny dependency-free SVG line plots for metric-vs-NFE curves."""

from __future__ import annotations

import math
from pathlib import Path

_PALETTE = (
    "#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#66a61e",
    "#e6ab02", "#a6761d", "#666666",
)

_W, _H = 720, 440
_MARGIN = {"left": 72, "right": 160, "top": 40, "bottom": 56}


def _ticks(lo: float, hi: float, n: int = 5):
    if not math.isfinite(lo) or not math.isfinite(hi) or hi <= lo:
        return [lo]
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def line_plot(
    series: list[tuple[str, list[float], list[float]]],
    path: Path | str,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    log_y: bool = False,
) -> None:
    """Write an SVG with one polyline per (label, xs, ys) series."""
    if not series:
        raise ValueError("no series to plot")
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        raise ValueError("series are empty")

    def ty(v):
        return math.log10(max(v, 1e-300)) if log_y else v

    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ty(v) for v in ys_all), max(ty(v) for v in ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    px0, px1 = _MARGIN["left"], _W - _MARGIN["right"]
    py0, py1 = _H - _MARGIN["bottom"], _MARGIN["top"]

    def sx(v):
        return px0 + (v - x_lo) / (x_hi - x_lo) * (px1 - px0)

    def sy(v):
        return py0 + (ty(v) - y_lo) / (y_hi - y_lo) * (py1 - py0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]
    # axes
    parts.append(
        f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" stroke="black"/>'
        f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" stroke="black"/>'
    )
    for tx in _ticks(x_lo, x_hi):
        parts.append(
            f'<line x1="{sx(tx):.1f}" y1="{py0}" x2="{sx(tx):.1f}" y2="{py0 + 4}" stroke="black"/>'
            f'<text x="{sx(tx):.1f}" y="{py0 + 18}" text-anchor="middle">{_fmt(tx)}</text>'
        )
    for tv in _ticks(y_lo, y_hi):
        val = 10**tv if log_y else tv
        yy = py0 + (tv - y_lo) / (y_hi - y_lo) * (py1 - py0)
        parts.append(
            f'<line x1="{px0 - 4}" y1="{yy:.1f}" x2="{px0}" y2="{yy:.1f}" stroke="black"/>'
            f'<text x="{px0 - 8}" y="{yy + 4:.1f}" text-anchor="end">{_fmt(val)}</text>'
        )
    parts.append(
        f'<text x="{(px0 + px1) / 2}" y="{_H - 12}" text-anchor="middle">{xlabel}</text>'
        f'<text x="18" y="{(py0 + py1) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(py0 + py1) / 2})">{ylabel}</text>'
    )
    for i, (label, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(zip(xs, ys)))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        ly = _MARGIN["top"] + 16 * i
        parts.append(
            f'<line x1="{px1 + 10}" y1="{ly}" x2="{px1 + 34}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
            f'<text x="{px1 + 40}" y="{ly + 4}">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
