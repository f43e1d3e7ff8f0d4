"""Matplotlib figures written next to the CSV reports.

All figures go through ``save`` which strips the PNG software tag so reruns
produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def new_figure(width=4.5, height=None, nrows=1, ncols=1):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    height = height or width * golden
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=(width, height))
    return fig, ax


def save(fig, path):
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(history, path):
    steps = [h[0] for h in history]
    mse = [h[2] for h in history]
    lr = [h[1] for h in history]
    fig, ax = new_figure()
    ax.semilogy(steps, np.maximum(mse, 1e-12), color="C0", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("training MSE")
    ax2 = ax.twinx()
    ax2.plot(steps, lr, color="C1", lw=0.8, ls="--")
    ax2.set_ylabel("learning rate", color="C1")
    return save(fig, path)


def plot_scatter(pred, mos, path, report=None, fitted=None):
    pred = np.asarray(pred, dtype=float)
    mos = np.asarray(mos, dtype=float)
    fig, ax = new_figure(width=4.0, height=4.0)
    ax.scatter(pred, mos, s=10, alpha=0.7, edgecolors="none")
    if fitted is not None:
        order = np.argsort(pred)
        ax.plot(pred[order], np.asarray(fitted)[order], color="C3", lw=1)
    ax.set_xlabel("predicted score")
    ax.set_ylabel("MOS")
    if report is not None:
        ax.set_title(f"SRCC {report.srcc:.3f}  KRCC {report.krcc:.3f}  PLCC {report.plcc:.3f}")
    return save(fig, path)


def plot_attention(image, heat, path):
    """Image, heat map and overlay side by side."""
    fig, axes = new_figure(width=7.5, height=2.8, ncols=3)
    axes[0].imshow(image)
    axes[1].imshow(heat, cmap="gray", vmin=0, vmax=1)
    axes[2].imshow(image)
    axes[2].imshow(heat, cmap="jet", alpha=0.45, vmin=0, vmax=1)
    for ax, title in zip(axes, ("distorted", "attention", "overlay")):
        ax.set_title(title)
        ax.set_axis_off()
    return save(fig, path)


def plot_ablation(rows, path):
    done = [r for r in rows if r.report is not None]
    fig, ax = new_figure(width=5.5)
    if done:
        x = np.arange(len(done))
        ax.bar(x - 0.2, [r.report.srcc for r in done], 0.4, label="SRCC")
        ax.bar(x + 0.2, [r.report.krcc for r in done], 0.4, label="KRCC")
        ax.set_xticks(x)
        ax.set_xticklabels([f"({r.config.id})" for r in done], rotation=30)
        ax.legend(frameon=False)
    ax.set_ylabel("correlation")
    return save(fig, path)
