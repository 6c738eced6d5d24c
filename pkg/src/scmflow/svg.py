"""Deterministic, self-contained SVG figures (time-space, min/max speed, flow).

Hand-rolled SVG 1.1 with no external references: the output is plain text,
byte-identical for identical inputs, and diffs cleanly in golden-file tests.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .analysis import DiagramSeries
from .core import ValidationError
from .engine import SimTrace

__all__ = ["render_timespace_svg", "render_minmax_svg", "render_diagram_svg"]

WIDTH, HEIGHT = 800, 560
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 55
PLOT_W = WIDTH - MARGIN_L - MARGIN_R
PLOT_H = HEIGHT - MARGIN_T - MARGIN_B

PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str,
                 xlim: tuple[float, float], ylim: tuple[float, float]):
        self.parts: list[str] = []
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        self.parts.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
            f'width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">'
        )
        self.parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        self.parts.append(
            f'<text x="{WIDTH // 2}" y="24" font-family="sans-serif" font-size="16" '
            f'text-anchor="middle">{title}</text>'
        )
        self._axes(xlabel, ylabel)

    def px(self, x: float) -> float:
        return MARGIN_L + PLOT_W * (x - self.x0) / (self.x1 - self.x0)

    def py(self, y: float) -> float:
        return MARGIN_T + PLOT_H * (1.0 - (y - self.y0) / (self.y1 - self.y0))

    def _axes(self, xlabel: str, ylabel: str) -> None:
        p = self.parts
        x_ax = MARGIN_T + PLOT_H
        p.append(f'<line x1="{MARGIN_L}" y1="{x_ax}" x2="{MARGIN_L + PLOT_W}" '
                 f'y2="{x_ax}" stroke="black"/>')
        p.append(f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
                 f'y2="{x_ax}" stroke="black"/>')
        for t in _nice_ticks(self.x0, self.x1):
            xp = self.px(t)
            p.append(f'<line x1="{xp:.2f}" y1="{x_ax}" x2="{xp:.2f}" '
                     f'y2="{x_ax + 5}" stroke="black"/>')
            p.append(f'<text x="{xp:.2f}" y="{x_ax + 20}" font-family="sans-serif" '
                     f'font-size="12" text-anchor="middle">{_fmt(t)}</text>')
        for t in _nice_ticks(self.y0, self.y1):
            yp = self.py(t)
            p.append(f'<line x1="{MARGIN_L - 5}" y1="{yp:.2f}" x2="{MARGIN_L}" '
                     f'y2="{yp:.2f}" stroke="black"/>')
            p.append(f'<text x="{MARGIN_L - 8}" y="{yp + 4:.2f}" font-family="sans-serif" '
                     f'font-size="12" text-anchor="end">{_fmt(t)}</text>')
        p.append(f'<text x="{MARGIN_L + PLOT_W // 2}" y="{HEIGHT - 12}" '
                 f'font-family="sans-serif" font-size="14" '
                 f'text-anchor="middle">{xlabel}</text>')
        p.append(f'<text x="18" y="{MARGIN_T + PLOT_H // 2}" '
                 f'font-family="sans-serif" font-size="14" text-anchor="middle" '
                 f'transform="rotate(-90 18 {MARGIN_T + PLOT_H // 2})">{ylabel}</text>')

    def polyline(self, xs: Sequence[float], ys: Sequence[float], color: str,
                 label: str = "") -> None:
        if len(xs) == 1:
            self.parts.append(
                f'<circle cx="{self.px(xs[0]):.2f}" cy="{self.py(ys[0]):.2f}" '
                f'r="3" fill="{color}"><title>{label}</title></circle>'
            )
            return
        pts = " ".join(f"{self.px(x):.2f},{self.py(y):.2f}" for x, y in zip(xs, ys))
        title = f"<title>{label}</title>" if label else ""
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1.2">{title}</polyline>'
        )

    def legend(self, entries: Sequence[tuple[str, str]]) -> None:
        y = MARGIN_T + 14
        for label, color in entries:
            self.parts.append(
                f'<line x1="{MARGIN_L + PLOT_W - 150}" y1="{y - 4}" '
                f'x2="{MARGIN_L + PLOT_W - 120}" y2="{y - 4}" stroke="{color}" '
                f'stroke-width="2"/>'
            )
            self.parts.append(
                f'<text x="{MARGIN_L + PLOT_W - 114}" y="{y}" '
                f'font-family="sans-serif" font-size="12">{label}</text>'
            )
            y += 18

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def render_timespace_svg(trace: SimTrace, every_kth: int = 1) -> str:
    """Time-space diagram: one trajectory polyline per every_kth-th vehicle."""
    if every_kth < 1:
        raise ValidationError(f"every_kth must be >= 1, got {every_kth}")
    ids = list(range(0, trace.n, every_kth))
    if not ids:
        raise ValidationError("no vehicles selected")
    t = trace.times
    xs = trace.states[:, ids]
    canvas = _Canvas(
        title=f"Time-space diagram ({len(ids)} of {trace.n} vehicles)",
        xlabel="t [s]", ylabel="x [m]",
        xlim=(float(t[0]), float(t[-1])),
        ylim=(float(xs.min()), float(xs.max())),
    )
    for col, vid in enumerate(ids):
        canvas.polyline(t, trace.states[:, vid], PALETTE[col % len(PALETTE)],
                        label=f"vehicle {vid}")
    return canvas.render()


def render_minmax_svg(trace: SimTrace) -> str:
    """Fleet-wide minimum and maximum momentary velocity over time."""
    t = trace.times
    vmin = trace.velocities.min(axis=1)
    vmax = trace.velocities.max(axis=1)
    lo = float(min(vmin.min(), 0.0))
    hi = float(vmax.max())
    canvas = _Canvas(
        title="Minimum / maximum momentary velocity",
        xlabel="t [s]", ylabel="v [m/s]",
        xlim=(float(t[0]), float(t[-1])), ylim=(lo, hi),
    )
    canvas.polyline(t, vmax, PALETTE[0], label="max velocity")
    canvas.polyline(t, vmin, PALETTE[1], label="min velocity")
    canvas.legend([("max", PALETTE[0]), ("min", PALETTE[1])])
    return canvas.render()


def render_diagram_svg(series: DiagramSeries) -> str:
    """Flow versus density curve."""
    if series.rho.size == 0:
        raise ValidationError("diagram series is empty")
    canvas = _Canvas(
        title="Flow versus density",
        xlabel="density [veh/m]", ylabel="flow Q [veh/s]",
        xlim=(float(series.rho[0]), float(series.rho[-1])),
        ylim=(0.0, float(series.q.max())),
    )
    canvas.polyline(series.rho, series.q, PALETTE[0], label="Q")
    return canvas.render()
