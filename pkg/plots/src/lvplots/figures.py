"""Figure builders.

Each builder returns a matplotlib Figure whose plotted series carry the
input values unchanged (tests extract them back from the artists).
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def theory_figure(rows: list[dict]):
    """Theory-vs-MC panels: MC points with error bars, dashed theory lines.

    One panel per setting present in the rows; an empty input produces a
    single empty axes.
    """
    settings = []
    for r in rows:
        if r["setting"] not in settings:
            settings.append(r["setting"])
    n = max(len(settings), 1)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.4), squeeze=False)
    axes = axes[0]
    if not rows:
        axes[0].set_title("no data")
        return fig

    for ax, setting in zip(axes, settings):
        sub = [r for r in rows if r["setting"] == setting]
        if setting == "hmm-fewshot":
            series_of = lambda r: (f"B*={r['B_star']:g} {r['student']}", r["k"])
            xlabel = "k"
        elif setting == "ridgeless":
            series_of = lambda r: (f"sigma_ext={r['sigma_ext']:g}", r["k"])
            xlabel = "k"
        else:
            series_of = lambda r: (f"M={r['M']:g} k={r['k']:g}", r["sigma_ext"] ** 2)
            xlabel = "sigma_ext^2"
        names = []
        for r in sub:
            name = series_of(r)[0]
            if name not in names:
                names.append(name)
        for name in names:
            pts = [(series_of(r)[1], r["mc_mean"], r["mc_sem"], r["theory"])
                   for r in sub if series_of(r)[0] == name]
            pts.sort(key=lambda p: p[0])
            x = [p[0] for p in pts]
            ax.errorbar(x, [p[1] for p in pts], yerr=[p[2] for p in pts],
                        fmt="o", ms=4, capsize=2, label=name)
            ax.plot(x, [p[3] for p in pts], "--", color=ax.lines[-1].get_color())
        ax.set_title(setting)
        ax.set_xlabel(xlabel)
        if setting != "prototype":
            ax.set_xscale("log", base=2)
        ax.legend(fontsize=6)
    fig.tight_layout()
    return fig


_SCATTER_PANELS = [
    ("d_s_to_t", "score", "decode error, model -> truth"),
    ("d_t_to_s", "score", "decode error, truth -> model"),
    ("d_t_to_s", "qk_mean", "decode error, truth -> model"),
]


def summary_figure(table: dict[str, dict[str, float]]):
    """Scatter panels of score / few-shot score against decoding errors."""
    fig, axes = plt.subplots(1, 3, figsize=(12.0, 3.4))
    models = [m for m in table if m != "teacher"]
    for ax, (xkey, ykey, xlabel) in zip(axes, _SCATTER_PANELS):
        xs, ys = [], []
        for m in models:
            row = table[m]
            y = row.get("q")
            if ykey == "qk_mean" or y is None or math.isnan(y):
                y = row.get("qk_mean") if ykey == "qk_mean" else row.get("loglik_test")
            x = row.get(xkey)
            if x is None or y is None or math.isnan(x) or math.isnan(y):
                continue
            xs.append(x)
            ys.append(y)
        ax.scatter(xs, ys, s=18)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("few-shot score" if ykey == "qk_mean" else "score")
    fig.tight_layout()
    return fig


def heatmap_figure(model_ids: list[str], matrix):
    """Cross-decoding matrix with a column-average margin row."""
    D = np.asarray(matrix, dtype=float)
    U = len(model_ids)
    col_avg = np.array([
        np.nanmean([D[u, v] for u in range(U) if u != v]) if U > 1 else float("nan")
        for v in range(U)
    ])
    fig, (ax, ax_margin) = plt.subplots(
        2, 1, figsize=(0.45 * U + 3, 0.45 * U + 4),
        gridspec_kw={"height_ratios": [U, 1]},
    )
    im = ax.imshow(D, cmap="viridis")
    ax.set_xticks(range(U), model_ids, rotation=90, fontsize=6)
    ax.set_yticks(range(U), model_ids, fontsize=6)
    ax.set_ylabel("source")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax_margin.imshow(col_avg[None, :], cmap="viridis", aspect="auto")
    ax_margin.set_yticks([0], ["col. avg"], fontsize=7)
    ax_margin.set_xticks([])
    fig.tight_layout()
    return fig


def hmm_graph_figure(nodes: dict[int, float], edges):
    """State graph on a circle; node area and edge width follow traffic.

    Edges flagged invisible (pruned) are skipped, matching the harness's
    pruning convention.
    """
    ids = sorted(nodes)
    M = len(ids)
    angle = {m: 2 * np.pi * i / M for i, m in enumerate(ids)}
    pos = {m: (np.cos(a), np.sin(a)) for m, a in angle.items()}
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for src, dst, w, pruned in edges:
        if pruned:
            continue
        x0, y0 = pos[src]
        x1, y1 = pos[dst]
        if src == dst:
            ax.plot([x0 * 1.12], [y0 * 1.12], "o", ms=14, mfc="none", mec="gray",
                    mew=1 + 8 * w)
            continue
        ax.annotate(
            "", xy=(x1, y1), xytext=(x0, y0),
            arrowprops={"arrowstyle": "-|>", "lw": 0.5 + 10 * w, "color": "tab:gray",
                        "shrinkA": 14, "shrinkB": 14,
                        "connectionstyle": "arc3,rad=0.12"},
        )
    weights = np.array([nodes[m] for m in ids])
    ax.scatter([pos[m][0] for m in ids], [pos[m][1] for m in ids],
               s=2500 * weights + 40, c=weights, cmap="plasma", zorder=3)
    for m in ids:
        ax.annotate(str(m), pos[m], ha="center", va="center", zorder=4, fontsize=9)
    ax.set_xlim(-1.45, 1.45)
    ax.set_ylim(-1.45, 1.45)
    ax.set_aspect("equal")
    ax.axis("off")
    return fig
