"""Matplotlib figures written next to the CSV/JSON outputs of the CLI."""
from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TERM_COLORS = {
    "total": "k",
    "semantic": "tab:blue",
    "critic": "tab:red",
    "ed": "tab:green",
    "reg": "tab:purple",
    "feat": "tab:orange",
}


def savefig(fig, path, dpi=120):
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", dpi=dpi, metadata={"Software": None})
    plt.close(fig)
    return path


def moving_average(values, window: int = 100) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return np.array([])
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_loss_curves(history: list[dict], path, window: int = 100, activation: int | None = None):
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.8))
    t = np.array([r["t"] for r in history])
    for name, color in TERM_COLORS.items():
        vals = np.array([r[name] for r in history])
        ax0.plot(t, vals, color=color, lw=0.8, label=name)
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("weighted term")
    ax0.set_yscale("symlog", linthresh=1e-2)
    ax0.legend(fontsize=8, frameon=False, ncol=2)

    ma = moving_average([r["total"] for r in history], window)
    if len(ma):
        ax1.plot(t[window - 1:], ma, color="k", lw=1.0)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel(f"total loss, {window}-step moving average")
    for ax in (ax0, ax1):
        if activation is not None:
            ax.axvline(activation, color="0.6", ls="--", lw=0.8)
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    return savefig(fig, path)


def plot_gradient_grid(images, rows: dict, path, labels=None):
    """``rows`` maps a model label to a list of visualized gradients, one per image."""
    n = len(images)
    fig, axes = plt.subplots(n, len(rows) + 1, figsize=(1.6 * (len(rows) + 1), 1.6 * n), squeeze=False)
    for i in range(n):
        img = np.asarray(images[i])
        if img.shape[0] == 3:
            img = img.transpose(1, 2, 0)
        axes[i, 0].imshow(np.clip(img, 0, 1))
        for j, (name, grads) in enumerate(rows.items(), start=1):
            g = np.asarray(grads[i])
            if g.ndim == 3 and g.shape[0] == 3:
                g = g.transpose(1, 2, 0)
            axes[i, j].imshow(g, cmap=None if g.ndim == 3 else "gray")
            if i == 0:
                axes[i, j].set_title(name, fontsize=8)
        if i == 0:
            axes[i, 0].set_title("input", fontsize=8)
        if labels is not None:
            axes[i, 0].set_ylabel(labels[i], fontsize=7)
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    return savefig(fig, path)


def plot_alignment(epsilons, scores, accuracies, path, norm: str = "l2"):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs = np.arange(len(epsilons))
    ax.plot(xs, scores, "o-", color="tab:blue", label="edge alignment")
    ax.set_xticks(xs, [f"{e:g}" if isinstance(e, (int, float)) else str(e) for e in epsilons])
    ax.set_xlabel(f"{norm} budget")
    ax.set_ylabel("gradient/edge correlation", color="tab:blue")
    if accuracies is not None:
        ax2 = ax.twinx()
        ax2.plot(xs, accuracies, "s--", color="tab:red")
        ax2.set_ylabel("clean accuracy", color="tab:red")
    return savefig(fig, path)
