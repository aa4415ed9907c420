"""Minimal SVG charts written as text (line chart and labeled scatter)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
W, H = 720, 420
PAD_L, PAD_R, PAD_T, PAD_B = 60, 150, 40, 50


def _num(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _frame(title: str, xlabel: str, ylabel: str, xr, yr, xticklabels=None) -> list[str]:
    x0, x1 = PAD_L, W - PAD_R
    y0, y1 = H - PAD_B, PAD_T
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) / 2:.0f}" y="{H - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>',
        f'<text x="15" y="{(y0 + y1) / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 15 {(y0 + y1) / 2:.0f})">{escape(ylabel)}</text>',
    ]
    for v in _ticks(*yr):
        y = _sy(v, yr)
        out.append(f'<line x1="{x0 - 4}" y1="{_num(y)}" x2="{x0}" y2="{_num(y)}" stroke="black"/>')
        out.append(
            f'<text x="{x0 - 6}" y="{_num(y + 4)}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.3g}</text>'
        )
    for i, v in enumerate(_ticks(*xr)):
        x = _sx(v, xr)
        label = xticklabels[i] if xticklabels else f"{v:.3g}"
        out.append(f'<line x1="{_num(x)}" y1="{y0}" x2="{_num(x)}" y2="{y0 + 4}" stroke="black"/>')
        out.append(
            f'<text x="{_num(x)}" y="{y0 + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{escape(str(label))}</text>'
        )
    return out


def _sx(v, xr):
    lo, hi = xr
    return PAD_L + (v - lo) / (hi - lo or 1.0) * (W - PAD_L - PAD_R)


def _sy(v, yr):
    lo, hi = yr
    return H - PAD_B - (v - lo) / (hi - lo or 1.0) * (H - PAD_T - PAD_B)


def _range(vals) -> tuple[float, float]:
    vals = np.asarray(vals, dtype=float)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - 0.05 * span, hi + 0.05 * span


def _legend(names) -> list[str]:
    out = []
    for i, name in enumerate(names):
        y = PAD_T + 10 + 18 * i
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{W - PAD_R + 12}" y="{y - 8}" width="12" height="8" fill="{c}"/>')
        out.append(f'<text x="{W - PAD_R + 30}" y="{y}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    return out


def line_chart(series: dict[str, np.ndarray], title: str, xlabels=None, ylabel: str = "", xlabel: str = "") -> str:
    """Polylines sharing an x index 0..len-1; ``xlabels`` annotate the ticks."""
    n = max(len(v) for v in series.values())
    xr = (0.0, float(max(n - 1, 1)))
    yr = _range(np.concatenate([np.asarray(v, float) for v in series.values()]))
    ticks = None
    if xlabels is not None:
        ticks = [xlabels[int(round(v))] for v in _ticks(*xr)]
    out = _frame(title, xlabel, ylabel, xr, yr, ticks)
    for i, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{_num(_sx(j, xr))},{_num(_sy(float(y), yr))}" for j, y in enumerate(ys) if np.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1.5" points="{pts}"/>')
    out += _legend(series)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter(points: np.ndarray, groups: list[str], labels: list[str], title: str) -> str:
    """2-D points colored by group, each annotated with its label."""
    pts = np.asarray(points, dtype=float)
    xr, yr = _range(pts[:, 0]), _range(pts[:, 1])
    out = _frame(title, "component 1", "component 2", xr, yr)
    names = list(dict.fromkeys(groups))
    for (x, y), g, lab in zip(pts, groups, labels):
        c = PALETTE[names.index(g) % len(PALETTE)]
        sx, sy = _sx(x, xr), _sy(y, yr)
        out.append(f'<circle cx="{_num(sx)}" cy="{_num(sy)}" r="4" fill="{c}"/>')
        out.append(f'<text x="{_num(sx + 5)}" y="{_num(sy - 5)}" font-family="sans-serif" font-size="9">{escape(lab)}</text>')
    out += _legend(names)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path
