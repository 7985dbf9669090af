"""Minimal self-contained SVG line and scatter plots."""

from __future__ import annotations

from html import escape

import numpy as np

_W, _H = 640, 420
_PAD_L, _PAD_R, _PAD_T, _PAD_B = 70, 150, 40, 50
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _range(values):
    lo, hi = float(np.nanmin(values)), float(np.nanmax(values))
    if not np.isfinite(lo) or not np.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Frame:
    def __init__(self, xs, ys, title, xlabel, ylabel):
        self.x0, self.x1 = _range(xs)
        self.y0, self.y1 = _range(ys)
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
            '<rect width="100%" height="100%" fill="white"/>',
            f'<text x="{_W / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        ]
        px0, px1 = _PAD_L, _W - _PAD_R
        py0, py1 = _H - _PAD_B, _PAD_T
        self.parts.append(f'<rect x="{px0}" y="{py1}" width="{px1 - px0}" height="{py0 - py1}" '
                          'fill="none" stroke="black"/>')
        for k in range(5):
            xv = self.x0 + (self.x1 - self.x0) * k / 4
            yv = self.y0 + (self.y1 - self.y0) * k / 4
            px, py = self.px(xv), self.py(yv)
            self.parts.append(f'<text x="{px:.1f}" y="{py0 + 18}" text-anchor="middle" font-family="sans-serif" '
                              f'font-size="11">{xv:.3g}</text>')
            self.parts.append(f'<text x="{px0 - 6}" y="{py + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                              f'font-size="11">{yv:.3g}</text>')
        self.parts.append(f'<text x="{(px0 + px1) / 2}" y="{_H - 10}" text-anchor="middle" font-family="sans-serif" '
                          f'font-size="13">{escape(xlabel)}</text>')
        self.parts.append(f'<text x="16" y="{(py0 + py1) / 2}" text-anchor="middle" font-family="sans-serif" '
                          f'font-size="13" transform="rotate(-90 16 {(py0 + py1) / 2})">{escape(ylabel)}</text>')

    def px(self, x):
        return _PAD_L + (x - self.x0) / (self.x1 - self.x0) * (_W - _PAD_R - _PAD_L)

    def py(self, y):
        return _H - _PAD_B - (y - self.y0) / (self.y1 - self.y0) * (_H - _PAD_B - _PAD_T)

    def legend(self, k, label, color):
        y = _PAD_T + 18 * k + 10
        x = _W - _PAD_R + 12
        self.parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 20}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        self.parts.append(f'<text x="{x + 26}" y="{y + 4}" font-family="sans-serif" font-size="12">'
                          f'{escape(label)}</text>')

    def close(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_plot(x, series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """``series`` maps label -> y values sampled at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    ys = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()]) if series else np.zeros(1)
    frame = _Frame(x, ys, title, xlabel, ylabel)
    for k, (label, y) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{frame.px(a):.2f},{frame.py(b):.2f}" for a, b in zip(x, np.asarray(y)) if np.isfinite(b))
        frame.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        frame.legend(k, label, color)
    return frame.close()


def scatter_plot(x, y, title: str = "", xlabel: str = "", ylabel: str = "", diagonal: bool = False) -> str:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    both = np.concatenate([x, y])
    frame = _Frame(both if diagonal else x, both if diagonal else y, title, xlabel, ylabel)
    if diagonal:
        lo, hi = max(frame.x0, frame.y0), min(frame.x1, frame.y1)
        frame.parts.append(f'<line x1="{frame.px(lo):.2f}" y1="{frame.py(lo):.2f}" x2="{frame.px(hi):.2f}" '
                           f'y2="{frame.py(hi):.2f}" stroke="gray" stroke-dasharray="4 3"/>')
        frame.legend(1, "nll = bound", "gray")
    for a, b in zip(x, y):
        if np.isfinite(a) and np.isfinite(b):
            frame.parts.append(f'<circle cx="{frame.px(a):.2f}" cy="{frame.py(b):.2f}" r="3" fill="{_COLORS[0]}"/>')
    frame.legend(0, "cells", _COLORS[0])
    return frame.close()
