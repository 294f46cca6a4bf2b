"""File-rendered matplotlib figures for training and evaluation reports.

Every function writes a PNG next to the delimited report it illustrates;
nothing opens an interactive window (Agg backend).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import imagedata
from .metrics import DiceReport, SplitDistribution, gaussian_density_table

_MODE_COLORS = {"dsrdn": "tab:blue", "plain": "tab:orange"}


def plot_loss_curves(history, path) -> None:
    """Total/CE on top, the two bank losses below, against the step index."""
    h = np.asarray(history, dtype=np.float64)
    fig, (ax_top, ax_bot) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    ax_top.plot(h[:, 0], h[:, 6], label="total", lw=1.2)
    ax_top.plot(h[:, 0], h[:, 3], label="cross-entropy", lw=1.0, alpha=0.8)
    ax_top.set_ylabel("loss")
    ax_top.legend(loc="upper right", fontsize=8)
    ax_top.grid(alpha=0.3)
    ax_bot.plot(h[:, 0], h[:, 4], label="bone bank", lw=1.0)
    ax_bot.plot(h[:, 0], h[:, 5], label="dirt bank", lw=1.0)
    ax_bot.set_xlabel("step")
    ax_bot.set_ylabel("bank loss")
    ax_bot.legend(loc="upper right", fontsize=8)
    ax_bot.grid(alpha=0.3)
    # mark learning-rate drops
    drops = np.nonzero(np.diff(h[:, 2]))[0]
    for ax in (ax_top, ax_bot):
        for d in drops:
            ax.axvline(h[d + 1, 0], color="gray", ls=":", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_f1_bars(pooled: DiceReport, path) -> None:
    """Pooled per-class F1 as a labeled bar chart."""
    fig, ax = plt.subplots(figsize=(5, 4))
    xs = np.arange(imagedata.NUM_CLASSES)
    ax.bar(xs, pooled.f1, color=["lightgray", "tab:brown", "tab:cyan"])
    for x, v in zip(xs, pooled.f1):
        ax.text(x, v + 0.01, f"{v:.4f}", ha="center", fontsize=9)
    ax.set_xticks(xs)
    ax.set_xticklabels(imagedata.CLASS_NAMES)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1 (pooled)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_train_size_comparison(rows: list[dict], path) -> None:
    """Per-class F1 against training-set size, one panel per class.

    `rows` entries need keys: mode, size, seed, f1 (length-3 sequence).
    Individual seeds are scattered; the per-mode median is drawn as a line.
    """
    fig, axes = plt.subplots(1, imagedata.NUM_CLASSES, figsize=(12, 4), sharey=True)
    sizes = sorted({r["size"] for r in rows})
    for c, ax in enumerate(axes):
        for mode in sorted({r["mode"] for r in rows}):
            color = _MODE_COLORS.get(mode, "tab:green")
            medians = []
            for size in sizes:
                vals = [r["f1"][c] for r in rows if r["mode"] == mode and r["size"] == size]
                ax.scatter([size] * len(vals), vals, color=color, s=14, alpha=0.5)
                medians.append(np.median(vals))
            ax.plot(sizes, medians, color=color, marker="o", label=mode)
        ax.set_title(imagedata.CLASS_NAMES[c])
        ax.set_xlabel("training images")
        ax.set_xticks(sizes)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("F1 (pooled over test set)")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_split_distributions(
    distributions: dict[str, SplitDistribution], path, num_points: int = 256
) -> None:
    """Gaussian F1 densities over repeated splits, one panel per class."""
    fig, axes = plt.subplots(1, imagedata.NUM_CLASSES, figsize=(12, 4))
    for mode, dist in distributions.items():
        table = gaussian_density_table(dist, num_points)
        color = _MODE_COLORS.get(mode, "tab:green")
        for c, ax in enumerate(axes):
            label = f"{mode} (m={dist.mean[c]:.3f}, v={dist.variance[c]:.2e})"
            ax.plot(table[:, 0], table[:, 1 + c], color=color, label=label)
    for c, ax in enumerate(axes):
        ax.set_title(imagedata.CLASS_NAMES[c])
        ax.set_xlabel("F1")
        ax.set_xlim(0, 1)
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("density")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
