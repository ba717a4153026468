"""PNG figures written next to report files (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def training_curves(histories: Mapping[str, Sequence], path) -> Path:
    """Train loss and held-out accuracy per epoch; one line per model."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.6))
    for name, history in histories.items():
        epochs = [m.epoch for m in history]
        ax_loss.plot(epochs, [m.train_loss for m in history], marker="o", label=name)
        acc = [m.val_accuracy for m in history]
        if all(a is not None for a in acc):
            ax_acc.plot(epochs, acc, marker="o", label=name)
    ax_loss.set(xlabel="epoch", ylabel="mean hinge loss", title="training loss")
    ax_acc.set(xlabel="epoch", ylabel="pairwise accuracy", title="held-out accuracy")
    ax_acc.axhline(0.5, color="grey", lw=0.8, ls="--")
    for ax in (ax_loss, ax_acc):
        ax.grid(alpha=0.3)
        if ax.lines:
            ax.legend(fontsize=8)
    return _save(fig, path)


def score_margins(margins: Mapping[str, np.ndarray], path, margin: float = 1.0) -> Path:
    """Histogram of r_pos - r_neg per model; mass right of 0 is accuracy."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    bins = np.linspace(-2, 2, 61)
    for name, values in margins.items():
        ax.hist(np.asarray(values), bins=bins, histtype="step", lw=1.5, label=name)
    ax.axvline(0.0, color="black", lw=0.8)
    ax.axvline(margin, color="grey", lw=0.8, ls="--")
    ax.set(xlabel="r_pos - r_neg", ylabel="tuples", title="score margin distribution")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def ablation_bars(rows: Mapping[str, tuple[float, float]], path, baseline: tuple[float, float] | None = None) -> Path:
    """Accuracy and average loss per model variant."""
    names = list(rows) + (["Word2vec-based"] if baseline else [])
    acc = [rows[n][0] for n in rows] + ([baseline[0]] if baseline else [])
    loss = [rows[n][1] for n in rows] + ([baseline[1]] if baseline else [])
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.6))
    x = np.arange(len(names))
    a1.bar(x, acc, color="tab:blue")
    a2.bar(x, loss, color="tab:orange")
    a1.set(title="accuracy", ylim=(min(0.4, min(acc) - 0.05), 1.0))
    a2.set(title="average loss")
    for ax in (a1, a2):
        ax.set_xticks(x, names, rotation=20, fontsize=8)
        ax.grid(alpha=0.3, axis="y")
    return _save(fig, path)


def replay_bars(recalls: Mapping[str, float], path, N: int = 50) -> Path:
    """Recall@N per retrieval strategy."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    names = list(recalls)
    ax.bar(names, [recalls[n] for n in names], color=["tab:green", "tab:purple", "tab:grey"][: len(names)])
    for i, n in enumerate(names):
        ax.text(i, recalls[n], f"{recalls[n]:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set(ylabel=f"recall@{N}", title="replay recall", ylim=(0, 1))
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, path)
