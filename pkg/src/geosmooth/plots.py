"""Minimal hand-written SVG line plots (log or linear axes)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93", "#00798c", "#8d6a9f", "#444444")


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    fit: tuple[float, float] | None = None   # (slope, intercept) in the plotted coordinates


def _ticks(lo, hi, count=5):
    return np.linspace(lo, hi, count)


def line_plot_svg(series: Sequence[Series], path, title: str = "", xlabel: str = "", ylabel: str = "",
                  logx: bool = True, logy: bool = True, width: int = 640, height: int = 420) -> None:
    tx = np.log10 if logx else (lambda v: np.asarray(v, dtype=float))
    ty = np.log10 if logy else (lambda v: np.asarray(v, dtype=float))
    pts = []
    for s in series:
        x, y = np.asarray(s.x, float), np.asarray(s.y, float)
        ok = np.isfinite(x) & np.isfinite(y) & ((x > 0) if logx else True) & ((y > 0) if logy else True)
        pts.append((tx(x[ok]), ty(y[ok])))
    allx = np.concatenate([p[0] for p in pts]) if pts else np.array([0.0, 1.0])
    ally = np.concatenate([p[1] for p in pts]) if pts else np.array([0.0, 1.0])
    if allx.size == 0:
        allx, ally = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05
    x0, x1 = x0 - pad * (x1 - x0), x1 + pad * (x1 - x0)
    y0, y1 = y0 - pad * (y1 - y0), y1 + pad * (y1 - y0)
    left, right, top, bottom = 70, 170, 40, 55
    pw, ph = width - left - right, height - top - bottom

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
    for v in _ticks(x0, x1):
        lab = f"{10 ** v:.3g}" if logx else f"{v:.3g}"
        out.append(f'<line x1="{sx(v):.1f}" y1="{top + ph}" x2="{sx(v):.1f}" y2="{top + ph + 4}" stroke="#333"/>')
        out.append(f'<text x="{sx(v):.1f}" y="{top + ph + 16}" text-anchor="middle">{lab}</text>')
    for v in _ticks(y0, y1):
        lab = f"{10 ** v:.3g}" if logy else f"{v:.3g}"
        out.append(f'<line x1="{left - 4}" y1="{sy(v):.1f}" x2="{left}" y2="{sy(v):.1f}" stroke="#333"/>')
        out.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{lab}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2})">{escape(ylabel)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for i, (s, (px, py)) in enumerate(zip(series, pts)):
        color = PALETTE[i % len(PALETTE)]
        if px.size:
            coords = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(px, py))
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            for a, b in zip(px, py):
                out.append(f'<circle cx="{sx(a):.1f}" cy="{sy(b):.1f}" r="3" fill="{color}"/>')
            if s.fit is not None and all(map(math.isfinite, s.fit)):
                slope, icept = s.fit
                a0, a1 = float(px.min()), float(px.max())
                out.append(f'<line x1="{sx(a0):.1f}" y1="{sy(icept + slope * a0):.1f}" x2="{sx(a1):.1f}" '
                           f'y2="{sy(icept + slope * a1):.1f}" stroke="{color}" stroke-dasharray="5,3"/>')
        ly = top + 14 + 16 * i
        label = s.label if s.fit is None else f"{s.label} (slope {s.fit[0]:.2f})"
        out.append(f'<rect x="{left + pw + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{left + pw + 24}" y="{ly + 1}">{escape(label)}</text>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")


def peakiness_svg(report, path, label: str = "H") -> None:
    """Log-log plot of ``H`` against ``1/h`` with the fitted line."""
    inv = 1.0 / np.asarray(report.h)
    H = np.asarray(report.H)
    icept = float(np.mean(np.log10(H) - report.slope * np.log10(inv)))
    series = [Series(label, inv, H, (report.slope, icept))]
    if report.Hs is not None:
        Hs = np.asarray(report.Hs)
        icept_s = float(np.mean(np.log10(Hs) - report.slope_s * np.log10(inv)))
        series.append(Series("Hs", inv, Hs, (report.slope_s, icept_s)))
    line_plot_svg(series, path, "kernel peakiness", "1/h", "H")
