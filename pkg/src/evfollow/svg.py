"""Dependency-free SVG charts. Output is a pure function of the data (no timestamps)."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#000000")
W, H = 720, 360
ML, MR, MT, MB = 60, 130, 30, 40


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda x: a + (x - lo) / span * (b - a)


def _decimate(x, y, max_points=1500):
    step = max(1, len(x) // max_points)
    return x[::step], y[::step]


def line_chart(t, series: dict, title: str, ylabel: str) -> str:
    t = np.asarray(t, dtype=float)
    ys = [np.asarray(v, dtype=float) for v in series.values()]
    lo = min(float(np.min(y)) for y in ys)
    hi = max(float(np.max(y)) for y in ys)
    sx = _scale(float(t[0]), float(t[-1]), ML, W - MR)
    sy = _scale(lo, hi, H - MB, MT)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{ML}" y1="{H - MB}" x2="{W - MR}" y2="{H - MB}" stroke="black"/>',
        f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{H - MB}" stroke="black"/>',
        f'<text x="{(ML + W - MR) / 2:.0f}" y="{H - 8}" text-anchor="middle" font-size="12">time [s]</text>',
        f'<text x="14" y="{H / 2:.0f}" transform="rotate(-90 14 {H / 2:.0f})" text-anchor="middle" font-size="12">{escape(ylabel)}</text>',
        f'<text x="{ML - 4}" y="{H - MB}" text-anchor="end" font-size="10">{lo:.3g}</text>',
        f'<text x="{ML - 4}" y="{MT + 10}" text-anchor="end" font-size="10">{hi:.3g}</text>',
    ]
    for i, (name, y) in enumerate(zip(series, ys)):
        color = PALETTE[i % len(PALETTE)]
        xd, yd = _decimate(t, y)
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(xd, yd))
        width = 2 if name == "experimental" else 1.2
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}"/>')
        ly = MT + 14 * i + 10
        parts.append(f'<line x1="{W - MR + 10}" y1="{ly - 4}" x2="{W - MR + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{W - MR + 34}" y="{ly}" font-size="11">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart(labels, values, title: str) -> str:
    """Log-scale bars, since RMSEs of different models span orders of magnitude."""
    vals = np.maximum(np.asarray(values, dtype=float), 1e-12)
    logs = np.log10(vals)
    lo, hi = float(np.floor(logs.min())), float(np.ceil(logs.max()))
    if hi == lo:
        hi = lo + 1
    sy = _scale(lo, hi, H - MB, MT)
    n = len(labels)
    bw = (W - ML - MR) / max(n, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{ML}" y1="{H - MB}" x2="{W - MR}" y2="{H - MB}" stroke="black"/>',
        f'<text x="{ML - 4}" y="{H - MB}" text-anchor="end" font-size="10">1e{lo:.0f}</text>',
        f'<text x="{ML - 4}" y="{MT + 10}" text-anchor="end" font-size="10">1e{hi:.0f}</text>',
    ]
    for i, (lab, v, lg) in enumerate(zip(labels, vals, logs)):
        x = ML + i * bw + bw * 0.15
        top = sy(lg)
        parts.append(f'<rect x="{x:.1f}" y="{top:.1f}" width="{bw * 0.7:.1f}" height="{H - MB - top:.1f}" fill="{PALETTE[i % len(PALETTE)]}"/>')
        parts.append(f'<text x="{x + bw * 0.35:.1f}" y="{H - MB + 14}" text-anchor="middle" font-size="11">{escape(lab.upper())}</text>')
        parts.append(f'<text x="{x + bw * 0.35:.1f}" y="{top - 3:.1f}" text-anchor="middle" font-size="10">{v:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
