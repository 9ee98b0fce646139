"""PNG figures for reports; always rendered off-screen."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> list[Path]:
    path = Path(path)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return [path]


def plot_sweep(rows: list[dict], path) -> list[Path]:
    ratios = [r["keep_ratio"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ratios, [r["val_rmse"] for r in rows], "o-", color="tab:blue")
    ax.set_xlabel("keep ratio")
    ax.set_ylabel("val RMSE", color="tab:blue")
    ax.invert_xaxis()
    ax2 = ax.twinx()
    ax2.plot(ratios, [r["gflops"] for r in rows], "s--", color="tab:red")
    ax2.set_ylabel("GFLOPs", color="tab:red")
    return _save(fig, path)


def plot_flop_curve(ratios, gflops, path) -> list[Path]:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ratios, gflops, "o-")
    ax.set_xlabel("keep ratio")
    ax.set_ylabel("GFLOPs")
    ax.invert_xaxis()
    return _save(fig, path)


def plot_training_curve(rows: list[dict], path) -> list[Path]:
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, [r["train_loss"] for r in rows], label="train loss")
    ax.set_xlabel("epoch")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["val_rmse"] for r in rows], color="tab:orange", label="val RMSE")
    fig.legend(loc="upper right")
    return _save(fig, path)


def plot_interval_maps(maps, path) -> list[Path]:
    """Two rows per history interval: prune mask (pruned cells white) and attention."""
    t = len(maps)
    fig, axes = plt.subplots(2, t, figsize=(1.8 * t, 3.8), squeeze=False)
    for i, m in enumerate(maps):
        axes[0, i].imshow(m.mask, cmap="Greys", vmin=0, vmax=1)
        axes[0, i].set_title(str(m.interval_id), fontsize=7)
        axes[1, i].imshow(m.attention, cmap="viridis")
        for ax in axes[:, i]:
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0, 0].set_ylabel("kept")
    axes[1, 0].set_ylabel("attention")
    return _save(fig, path)


def plot_prediction(pred: np.ndarray, truth: np.ndarray, channels, path) -> list[Path]:
    m = len(channels)
    fig, axes = plt.subplots(2, m, figsize=(2.4 * m, 4.4), squeeze=False)
    for c, name in enumerate(channels):
        lo, hi = min(pred[c].min(), truth[c].min()), max(pred[c].max(), truth[c].max())
        axes[0, c].imshow(pred[c], vmin=lo, vmax=hi)
        axes[1, c].imshow(truth[c], vmin=lo, vmax=hi)
        axes[0, c].set_title(name, fontsize=8)
        for ax in axes[:, c]:
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0, 0].set_ylabel("prediction")
    axes[1, 0].set_ylabel("target")
    return _save(fig, path)
