"""Tiny standalone SVG line-plot writer (no plotting dependency)."""
from __future__ import annotations

import numpy as np

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + step / 2, step)


def line_plot(path, series: dict, title: str = "", xlabel: str = "",
              ylabel: str = "", log_y: bool = False,
              width: int = 640, height: int = 420):
    """Write an SVG with one polyline per named (x, y) series."""
    ml, mr, mt, mb = 60, 15, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    xs, ys = [], []
    for x, y in series.values():
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        keep = np.isfinite(x) & np.isfinite(y) & ((y > 0) if log_y else True)
        xs.append(x[keep])
        ys.append(np.log10(y[keep]) if log_y else y[keep])
    allx = np.concatenate(xs) if xs else np.array([0.0, 1.0])
    ally = np.concatenate(ys) if ys else np.array([0.0, 1.0])
    x0, x1 = (float(allx.min()), float(allx.max())) if allx.size else (0, 1)
    y0, y1 = (float(ally.min()), float(ally.max())) if ally.size else (0, 1)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0

    def sx(v):
        return ml + pw * (v - x0) / (x1 - x0)

    def sy(v):
        return mt + ph * (1.0 - (v - y0) / (y1 - y0))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width/2:.0f}" y="18" text-anchor="middle" '
             f'font-family="sans-serif" font-size="13">{title}</text>']
    for tx in _ticks(x0, x1):
        parts.append(f'<line x1="{sx(tx):.1f}" y1="{mt}" x2="{sx(tx):.1f}" '
                     f'y2="{mt+ph}" stroke="#eeeeee"/>')
        parts.append(f'<text x="{sx(tx):.1f}" y="{mt+ph+16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="10">{tx:.4g}</text>')
    for ty in _ticks(y0, y1):
        label = f"1e{ty:.3g}" if log_y else f"{ty:.4g}"
        parts.append(f'<line x1="{ml}" y1="{sy(ty):.1f}" x2="{ml+pw}" '
                     f'y2="{sy(ty):.1f}" stroke="#eeeeee"/>')
        parts.append(f'<text x="{ml-6}" y="{sy(ty)+3:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{label}</text>')
    parts.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" '
                 f'fill="none" stroke="#333333"/>')
    for i, (name, (x, y)) in enumerate(series.items()):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        keep = np.isfinite(x) & np.isfinite(y) & ((y > 0) if log_y else True)
        yv = np.log10(y[keep]) if log_y else y[keep]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x[keep], yv))
        color = _COLORS[i % len(_COLORS)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{ml+8}" y="{mt+14+12*i}" font-family="sans-serif" '
                     f'font-size="10" fill="{color}">{name}</text>')
    parts.append(f'<text x="{width/2:.0f}" y="{height-8}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="11">{xlabel}</text>')
    parts.append(f'<text x="14" y="{height/2:.0f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="11" '
                 f'transform="rotate(-90 14 {height/2:.0f})">{ylabel}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
