"""Matplotlib helpers for report figures. Always renders off-screen."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .. import CLASSES  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# no timestamps or version strings, so reruns write identical files
_PNG_META = {"Software": None}


def save(fig, path):
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)


def plot_history(history, path, title=None):
    with plt.rc_context(RC):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3))
        epochs = [h["epoch"] for h in history]
        ax_loss.plot(epochs, [h["train_loss"] for h in history], label="train loss")
        ax_loss.plot(epochs, [h["val_loss"] for h in history], label="validation loss")
        ax_loss.plot(epochs, [h["val_mse"] for h in history], "--", label="validation MSE")
        ax_loss.set_xlabel("epoch")
        ax_loss.legend(frameon=False)
        ax_acc.plot(epochs, [100 * h["val_accuracy"] for h in history], color="C3")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("validation accuracy (%)")
        if title:
            fig.suptitle(title)
        save(fig, path)


def plot_confusion(cm, path, title=None, labels=CLASSES):
    cm = np.asarray(cm)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.2, 3))
        ax.imshow(cm, cmap="Blues")
        for (i, j), v in np.ndenumerate(cm):
            color = "white" if v > cm.max() / 2 else "black"
            ax.text(j, i, str(v), ha="center", va="center", color=color)
        ax.set_xticks(range(len(labels)), labels)
        ax.set_yticks(range(len(labels)), labels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if title:
            ax.set_title(title)
        save(fig, path)


def plot_activation_grid(maps, path, title=None, cols=8):
    rows = int(np.ceil(len(maps) / cols))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.1, rows * 1.1))
        for ax in np.atleast_1d(axes).ravel():
            ax.axis("off")
        for ax, m in zip(np.atleast_1d(axes).ravel(), maps):
            ax.imshow(m, cmap="gray", vmin=0, vmax=255)
        if title:
            fig.suptitle(title)
        save(fig, path)


def plot_cv_accuracies(rows, path):
    """Bar chart of per-fold train/validation/test accuracy."""
    stages = ("train", "validation", "test")
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        x = np.arange(len(rows))
        for k, stage in enumerate(stages):
            ax.bar(x + (k - 1) * 0.25, [100 * r[stage] for r in rows], width=0.25, label=stage)
        ax.set_xticks(x, [r["fold"] for r in rows])
        ax.set_ylabel("accuracy (%)")
        ax.legend(frameon=False, loc="lower right")
        save(fig, path)
