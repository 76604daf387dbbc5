"""Matplotlib figure export for the CLI report paths.

Every figure lands next to its delimited counterpart (loss.csv,
probe.csv, heatmap PGMs) so runs are inspectable at a glance without
any notebook tooling.
"""

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})

_SERIES = ("l_mim", "l_align", "l_mlm", "l_total")


def save_loss_curves(csv_path, png_path) -> None:
    """Plot the per-step loss components from a training CSV."""
    rows = {name: [] for name in _SERIES}
    steps = []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            for name in _SERIES:
                rows[name].append(float(row[name]))
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in _SERIES:
        ax.plot(steps, rows[name], label=name, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)


def save_probe_chart(result, png_path, label_names=None) -> None:
    """Bar chart of per-label AUC with the macro average marked."""
    aucs = result.per_label_auc
    names = label_names or [f"label {i}" for i in range(len(aucs))]
    heights = [0.0 if np.isnan(a) else a for a in aucs]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(aucs)), 3.5))
    bars = ax.bar(names, heights, color="#4878a8")
    for bar, a in zip(bars, aucs):
        if np.isnan(a):
            ax.text(bar.get_x() + bar.get_width() / 2, 0.02, "n/a",
                    ha="center", fontsize=8)
    if not np.isnan(result.macro_auc):
        ax.axhline(result.macro_auc, color="#a84848", linestyle="--",
                   label=f"macro {result.macro_auc:.3f}")
        ax.legend()
    ax.axhline(0.5, color="gray", linewidth=0.8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("AUC")
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)


def save_heatmap_montage(heatmap, png_path, truth_idx=None) -> None:
    """All depth slices side by side, top-K patches outlined."""
    gh, gw, gd = heatmap.grid_dims
    grid = heatmap.scores.reshape(gd, gh, gw)
    topk = set(int(i) for i in heatmap.topk_idx)
    truth = set(int(i) for i in truth_idx) if truth_idx is not None else set()
    fig, axes = plt.subplots(1, gd, figsize=(1.6 * gd, 2.0))
    if gd == 1:
        axes = [axes]
    vmin, vmax = float(grid.min()), float(grid.max())
    for z, ax in enumerate(axes):
        ax.imshow(grid[z], vmin=vmin, vmax=vmax if vmax > vmin else vmin + 1,
                  cmap="inferno")
        for y in range(gh):
            for x in range(gw):
                idx = z * gh * gw + y * gw + x
                if idx in topk:
                    ax.add_patch(plt.Rectangle((x - 0.5, y - 0.5), 1, 1,
                                 fill=False, edgecolor="cyan", linewidth=1.4))
                if idx in truth:
                    ax.plot(x, y, "w+", markersize=6)
        ax.set_title(f"z={z}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.grid(False)
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)
