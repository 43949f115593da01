"""Matplotlib figures written next to the CLI's file outputs.

Figures are built with the object-oriented API (``Figure`` + Agg canvas),
so nothing touches pyplot's global state and no display is needed.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .metrics import EvalReport
from .vizio import flow_to_color

DPI = 120


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")


def flow_figure(flow, path, title: str = "flow") -> None:
    fig = Figure(figsize=(4, 4))
    ax = fig.add_subplot(1, 1, 1)
    ax.imshow(flow_to_color(flow).data, interpolation="nearest")
    mag = np.hypot(flow.u, flow.v)[flow.valid]
    ax.set_title(f"{title}  (max |flow| {mag.max() if mag.size else 0:.2f} px)", fontsize=9)
    ax.set_axis_off()
    _save(fig, path)


def attention_figure(img1, attention, queries, grid_hw, path) -> None:
    """Reference frame with query markers, then one attention map per query.

    ``queries`` are ``(row, col)`` cells of the ``grid_hw`` feature grid.
    """
    gh, gw = grid_hw
    sy, sx = img1.height / gh, img1.width / gw
    n = len(queries)
    fig = Figure(figsize=(3 * (n + 1), 3.2))
    ax = fig.add_subplot(1, n + 1, 1)
    ax.imshow(img1.data if img1.channels == 3 else img1.data[..., 0], cmap="gray", interpolation="nearest")
    for k, (r, c) in enumerate(queries):
        ax.plot((c + 0.5) * sx - 0.5, (r + 0.5) * sy - 0.5, marker="x", color=f"C{k}", ms=9, mew=2)
    ax.set_title("reference frame", fontsize=9)
    ax.set_axis_off()
    for k, (r, c) in enumerate(queries):
        ax = fig.add_subplot(1, n + 1, k + 2)
        row = attention.weights[r * gw + c].reshape(gh, gw)
        ax.imshow(row, cmap="inferno", interpolation="nearest")
        ax.plot(c, r, marker="x", color=f"C{k}", ms=9, mew=2)
        ax.set_title(f"query ({r}, {c})", fontsize=9)
        ax.set_axis_off()
    _save(fig, path)


def eval_figure(report: EvalReport, path, baseline: EvalReport | None = None) -> None:
    names = [n for n in report.region_names() if report.aepe.get(n) is not None]
    fig = Figure(figsize=(5, 3))
    ax = fig.add_subplot(1, 1, 1)
    x = np.arange(len(names))
    ours = [report.aepe[n] for n in names]
    if baseline is None:
        ax.bar(x, ours, color="C0")
    else:
        base = [baseline.aepe.get(n) or 0.0 for n in names]
        ax.bar(x - 0.2, base, width=0.4, color="C7", label="baseline")
        ax.bar(x + 0.2, ours, width=0.4, color="C0", label="this run")
        ax.legend(fontsize=8, frameon=False)
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("AEPE (px)")
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    _save(fig, path)
