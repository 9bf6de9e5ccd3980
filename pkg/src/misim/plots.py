"""Static SVG figures: CV-MSE densities, boxplots, and predicted-vs-true QQ.

Everything is emitted as plain SVG text.  Inputs are the dictionaries
written to ``summary.json`` and ``replicates.json``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .imputers import METHODS
from .mcengine import BRANCHES

COLORS = {
    "T1": "#1b9e77",
    "T2": "#d95f02",
    "T3": "#7570b3",
    "T4": "#e7298a",
    "T5": "#66a61e",
    "T6": "#e6ab02",
}
PANEL_W, PANEL_H, MARGIN = 360.0, 260.0, 44.0


class PlotError(ValueError):
    pass


# -- statistics ---------------------------------------------------------------


def silverman_bandwidth(x) -> float:
    """``0.9 * min(sd, IQR / 1.34) * n^(-1/5)``; 0 for a constant series.

    If the IQR is 0 but the sd is not, the sd term alone is used.
    """
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return 0.0
    sd = float(np.std(x, ddof=1))
    if sd == 0.0:
        return 0.0
    q75, q25 = np.quantile(x, [0.75, 0.25])
    iqr = (q75 - q25) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def kde(x, grid, bw: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = (np.asarray(grid, dtype=float)[:, None] - x[None, :]) / bw
    return np.exp(-0.5 * u**2).sum(axis=1) / (x.size * bw * np.sqrt(2 * np.pi))


@dataclass(frozen=True)
class BoxStats:
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple


def boxplot_stats(x) -> BoxStats:
    """Quartiles (linear interpolation) and 1.5 IQR whiskers.

    Whiskers end at the most extreme data points inside the fences.
    """
    x = np.sort(np.asarray(x, dtype=float))
    if x.size == 0:
        raise PlotError("empty series")
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
    lo_fence, hi_fence = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    outliers = tuple(float(v) for v in x[(x < lo_fence) | (x > hi_fence)])
    return BoxStats(
        float(q1), float(med), float(q3), float(inside.min()), float(inside.max()), outliers
    )


# -- svg primitives -----------------------------------------------------------


def _f(v: float) -> str:
    return f"{v:.2f}"


class Axes:
    """Linear data-to-pixel map for one panel at offset ``(ox, oy)``."""

    def __init__(self, ox, oy, xlim, ylim, w=PANEL_W, h=PANEL_H):
        self.ox, self.oy, self.w, self.h = ox, oy, w, h
        self.xlim = _pad(xlim)
        self.ylim = _pad(ylim)

    def px(self, x):
        x0, x1 = self.xlim
        return self.ox + MARGIN + (np.asarray(x, dtype=float) - x0) / (x1 - x0) * (self.w - 2 * MARGIN)

    def py(self, y):
        y0, y1 = self.ylim
        return self.oy + self.h - MARGIN - (np.asarray(y, dtype=float) - y0) / (y1 - y0) * (self.h - 2 * MARGIN)

    def points(self, xs, ys) -> str:
        return " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(self.px(xs), self.py(ys)))

    def frame(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        x0, y0 = self.ox + MARGIN, self.oy + MARGIN
        w, h = self.w - 2 * MARGIN, self.h - 2 * MARGIN
        out = [
            f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(w)}" height="{_f(h)}" fill="none" stroke="#444"/>',
            _text(self.ox + self.w / 2, self.oy + MARGIN - 12, title, anchor="middle", size=13),
            _text(self.ox + self.w / 2, self.oy + self.h - 8, xlabel, anchor="middle"),
            _text(self.ox + 12, self.oy + self.h / 2, ylabel, anchor="middle", rotate=True),
        ]
        for v in np.linspace(*self.xlim, 5):
            out.append(_text(float(self.px(v)), y0 + h + 14, f"{v:.3g}", anchor="middle", size=9))
        for v in np.linspace(*self.ylim, 5):
            out.append(_text(x0 - 4, float(self.py(v)) + 3, f"{v:.3g}", anchor="end", size=9))
        return out


def _pad(lim):
    lo, hi = float(lim[0]), float(lim[1])
    if hi <= lo:
        half = max(abs(lo) * 0.05, 0.5)
        return lo - half, hi + half
    return lo, hi


def _text(x, y, s, anchor="start", size=11, rotate=False) -> str:
    rot = f' transform="rotate(-90 {_f(x)} {_f(y)})"' if rotate else ""
    return (
        f'<text x="{_f(x)}" y="{_f(y)}" font-family="sans-serif" font-size="{size}" '
        f'text-anchor="{anchor}"{rot}>{escape(s)}</text>'
    )


def _document(width, height, body: Sequence[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(width)} {_f(height)}">'
    )
    bg = f'<rect width="{_f(width)}" height="{_f(height)}" fill="white"/>'
    return "\n".join([head, bg, *body, "</svg>"]) + "\n"


def _legend(x, y, methods) -> list[str]:
    out = []
    for i, m in enumerate(methods):
        yy = y + 14 * i
        out.append(f'<line x1="{_f(x)}" y1="{_f(yy)}" x2="{_f(x + 16)}" y2="{_f(yy)}" stroke="{COLORS[m]}" stroke-width="2"/>')
        out.append(_text(x + 20, yy + 4, m, size=10))
    return out


def _ordered(series: dict, branch: str) -> list[str]:
    return [m for m in METHODS if (branch, m) in series]


# -- panels -------------------------------------------------------------------


def density_svg(series: dict, title: str = "") -> str:
    """One panel per branch; ``series`` maps ``(branch, method)`` to values."""
    branches = [b for b in BRANCHES if any(k[0] == b for k in series)]
    body = [_text(10, 16, title, size=12)]
    for col, branch in enumerate(branches):
        methods = _ordered(series, branch)
        allv = np.concatenate([np.asarray(series[(branch, m)], dtype=float) for m in methods])
        lo, hi = float(allv.min()), float(allv.max())
        span = hi - lo if hi > lo else max(abs(lo) * 0.1, 1.0)
        grid = np.linspace(lo - 0.25 * span, hi + 0.25 * span, 200)
        curves, spikes = {}, {}
        for m in methods:
            v = np.asarray(series[(branch, m)], dtype=float)
            bw = silverman_bandwidth(v)
            if bw > 0:
                curves[m] = kde(v, grid, bw)
            else:
                spikes[m] = float(v[0])
        ymax = max([float(c.max()) for c in curves.values()] + [1.0 if not curves else 0.0])
        ax = Axes(col * PANEL_W, 24, (grid[0], grid[-1]), (0.0, ymax * 1.05))
        body += ax.frame(branch, "CV-MSE", "density")
        for m in methods:
            if m in curves:
                body.append(
                    f'<polyline class="density" data-method="{m}" fill="none" stroke="{COLORS[m]}" '
                    f'stroke-width="1.5" points="{ax.points(grid, curves[m])}"/>'
                )
            else:
                x = _f(float(ax.px(spikes[m])))
                body.append(
                    f'<line class="spike" data-method="{m}" x1="{x}" y1="{_f(float(ax.py(0)))}" '
                    f'x2="{x}" y2="{_f(float(ax.py(ymax)))}" stroke="{COLORS[m]}" stroke-width="2"/>'
                )
                body.append(_text(float(ax.px(spikes[m])) + 3, float(ax.py(ymax)) + 10, f"{m} constant", size=9))
        body += _legend(col * PANEL_W + PANEL_W - MARGIN - 40, 24 + MARGIN + 10, methods)
    return _document(PANEL_W * max(len(branches), 1), PANEL_H + 24, body)


def boxplot_svg(series: dict, title: str = "") -> str:
    branches = [b for b in BRANCHES if any(k[0] == b for k in series)]
    body = [_text(10, 16, title, size=12)]
    for col, branch in enumerate(branches):
        methods = _ordered(series, branch)
        stats = {m: boxplot_stats(series[(branch, m)]) for m in methods}
        allv = np.concatenate([np.asarray(series[(branch, m)], dtype=float) for m in methods])
        ax = Axes(col * PANEL_W, 24, (0.5, len(methods) + 0.5), (float(allv.min()), float(allv.max())))
        body += ax.frame(branch, "method", "CV-MSE")
        for i, m in enumerate(methods, start=1):
            st, c = stats[m], COLORS[m]
            xc = float(ax.px(i))
            half = 0.3 * (float(ax.px(1)) - float(ax.px(0)))
            y = {k: _f(float(ax.py(getattr(st, k)))) for k in ("q1", "median", "q3", "whisker_low", "whisker_high")}
            body += [
                f'<g class="box" data-method="{m}">',
                f'<line x1="{_f(xc)}" y1="{y["whisker_low"]}" x2="{_f(xc)}" y2="{y["q1"]}" stroke="{c}"/>',
                f'<line x1="{_f(xc)}" y1="{y["q3"]}" x2="{_f(xc)}" y2="{y["whisker_high"]}" stroke="{c}"/>',
                f'<rect x="{_f(xc - half)}" y="{y["q3"]}" width="{_f(2 * half)}" '
                f'height="{_f(float(ax.py(st.q1)) - float(ax.py(st.q3)))}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>',
                f'<line x1="{_f(xc - half)}" y1="{y["median"]}" x2="{_f(xc + half)}" y2="{y["median"]}" stroke="{c}" stroke-width="2"/>',
            ]
            for o in st.outliers:
                body.append(f'<circle cx="{_f(xc)}" cy="{_f(float(ax.py(o)))}" r="2" fill="none" stroke="{c}"/>')
            body.append("</g>")
            body.append(_text(xc, float(ax.py(ax.ylim[0])) + 26, m, anchor="middle", size=10))
    return _document(PANEL_W * max(len(branches), 1), PANEL_H + 24, body)


def qq_axes(curves: dict, col: int) -> Axes:
    """Square panel with a shared x/y range so the identity line is the diagonal."""
    allv = np.concatenate([np.concatenate([c["true_q"], c["pred_q"]]) for c in curves.values()])
    lim = (float(allv.min()), float(allv.max()))
    return Axes(col * PANEL_H, 24, lim, lim, w=PANEL_H, h=PANEL_H)


def qq_svg(curves: dict, title: str = "") -> str:
    """``curves`` maps ``(branch, method)`` to dicts with ``true_q`` and ``pred_q``."""
    branches = [b for b in BRANCHES if any(k[0] == b for k in curves)]
    body = [_text(10, 16, title, size=12)]
    for col, branch in enumerate(branches):
        methods = _ordered(curves, branch)
        sub = {m: {k: np.asarray(curves[(branch, m)][k], dtype=float) for k in ("true_q", "pred_q")} for m in methods}
        ax = qq_axes(sub, col)
        body += ax.frame(branch, "true y quantile", "predicted quantile")
        lo, hi = ax.xlim
        body.append(
            f'<line class="identity" x1="{_f(float(ax.px(lo)))}" y1="{_f(float(ax.py(lo)))}" '
            f'x2="{_f(float(ax.px(hi)))}" y2="{_f(float(ax.py(hi)))}" stroke="#888" stroke-dasharray="4 3"/>'
        )
        for m in methods:
            body.append(
                f'<polyline class="qq" data-method="{m}" fill="none" stroke="{COLORS[m]}" '
                f'stroke-width="1.5" points="{ax.points(sub[m]["true_q"], sub[m]["pred_q"])}"/>'
            )
        body += _legend(col * PANEL_H + MARGIN + 8, 24 + MARGIN + 10, methods)
    return _document(PANEL_H * max(len(branches), 1), PANEL_H + 24, body)


# -- files --------------------------------------------------------------------


def emit_plots(summaries: list[dict], replicates: list[dict] | None, out_dir) -> list[Path]:
    """Write three SVGs per scenario; needs the replicate CV-MSE traces."""
    if not replicates:
        raise PlotError("per-replicate values are missing; rerun simulate with --keep-replicates")
    by_key = {r["key"]: r for r in replicates}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(summaries):
        rep = by_key.get(s["key"])
        if rep is None:
            raise PlotError(f"no replicate values for scenario {s['key']}; rerun with --keep-replicates")
        series = {(c["branch"], c["method"]): c["values"] for c in rep["cv_mse"]}
        curves = {(c["branch"], c["method"]): c["qq"] for c in s["cells"]}
        for kind, svg in (
            ("density", density_svg(series, s["key"])),
            ("boxplot", boxplot_svg(series, s["key"])),
            ("qq", qq_svg(curves, s["key"])),
        ):
            path = out_dir / f"scenario{i:03d}_{kind}.svg"
            path.write_text(svg)
            written.append(path)
    return written
