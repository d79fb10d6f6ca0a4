"""Minimal SVG 1.1 charts: line plots (SR vs eps) and scatter plots (rho vs accuracy)."""
from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=56, right=120, top=24, bottom=44)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


class _Frame:
    def __init__(self, xlim, ylim, logx: bool):
        self.logx = logx
        self.x0, self.x1 = (np.log10(xlim[0]), np.log10(xlim[1])) if logx else xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        self.w = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(self, x: float) -> float:
        v = np.log10(x) if self.logx else x
        return MARGIN["left"] + (v - self.x0) / (self.x1 - self.x0) * self.w

    def py(self, y: float) -> float:
        return MARGIN["top"] + (1 - (y - self.y0) / (self.y1 - self.y0)) * self.h


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:g}"


def _axes(f: _Frame, xlabel: str, ylabel: str, title: str) -> list[str]:
    left, top = MARGIN["left"], MARGIN["top"]
    bottom, right = top + f.h, left + f.w
    out = [
        f'<rect x="{left}" y="{top}" width="{f.w}" height="{f.h}" fill="none" stroke="#000"/>',
        f'<text x="{(left + right) / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{(top + bottom) / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {(top + bottom) / 2:.1f})">{escape(ylabel)}</text>',
    ]
    if title:
        out.append(f'<text x="{(left + right) / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>')
    if f.logx:
        xticks = [10.0**e for e in range(int(np.ceil(f.x0 - 1e-9)), int(np.floor(f.x1 + 1e-9)) + 1)]
    else:
        xticks = list(np.linspace(f.x0, f.x1, 5))
    for t in xticks:
        x = f.px(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{bottom}" x2="{_fmt(x)}" y2="{bottom + 4}" stroke="#000"/>')
        out.append(f'<text x="{_fmt(x)}" y="{bottom + 16}" text-anchor="middle" font-size="10">{_tick_label(t)}</text>')
    for t in np.linspace(f.y0, f.y1, 5):
        y = f.py(t)
        out.append(f'<line x1="{left - 4}" y1="{_fmt(y)}" x2="{left}" y2="{_fmt(y)}" stroke="#000"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(y + 3)}" text-anchor="end" font-size="10">{_tick_label(round(t, 3))}</text>')
    return out


def _legend(labels: Sequence[str]) -> list[str]:
    x = WIDTH - MARGIN["right"] + 10
    out = []
    for i, label in enumerate(labels):
        y = MARGIN["top"] + 12 + 16 * i
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="{x}" y1="{y}" x2="{x + 16}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x + 20}" y="{y + 4}" font-size="10">{escape(label)}</text>')
    return out


def _document(body: list[str]) -> str:
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">\n'
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#fff"/>\n'
    )
    return head + "\n".join(body) + "\n</svg>\n"


def line_chart(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    xlabel: str = "L2 bound",
    ylabel: str = "success rate",
    title: str = "",
    logx: bool = True,
    ylim: tuple[float, float] = (0.0, 1.0),
) -> str:
    """One polyline per ``(label, xs, ys)`` series."""
    if not series:
        raise ValueError("line_chart needs at least one series")
    xs_all = np.concatenate([np.asarray(s[1], dtype=np.float64) for s in series])
    if logx and (xs_all <= 0).any():
        raise ValueError("log-scaled x axis needs positive values")
    f = _Frame((xs_all.min(), xs_all.max()), ylim, logx)
    body = _axes(f, xlabel, ylabel, title)
    for i, (_, xs, ys) in enumerate(series):
        pts = " ".join(f"{_fmt(f.px(x))},{_fmt(f.py(y))}" for x, y in zip(xs, ys))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="2"/>')
    body += _legend([s[0] for s in series])
    return _document(body)


def scatter_chart(
    xs: Sequence[float],
    ys: Sequence[float],
    xlabel: str = "Spearman rho",
    ylabel: str = "accuracy",
    title: str = "",
    xlim: tuple[float, float] = (-1.0, 1.0),
) -> str:
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    lo, hi = float(ys.min()), float(ys.max())
    pad = max(0.01, 0.05 * (hi - lo))
    f = _Frame(xlim, (max(0.0, lo - pad), min(1.0, hi + pad)), False)
    body = _axes(f, xlabel, ylabel, title)
    for x, y in zip(xs, ys):
        body.append(f'<circle cx="{_fmt(f.px(x))}" cy="{_fmt(f.py(y))}" r="2.5" fill="{PALETTE[0]}" fill-opacity="0.7"/>')
    return _document(body)
