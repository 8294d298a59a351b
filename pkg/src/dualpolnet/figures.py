"""Report figures rendered to files alongside the delimited outputs.

Everything uses the Agg backend so figure emission works headless; every
writer is atomic (temp file + rename) like the CSV/JSONL exporters.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import ConfusionMatrix  # noqa: E402


def _atomic_savefig(fig, path: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}.png"
    fig.savefig(tmp, dpi=120, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)


def save_loss_curve(log_rows: list[dict], path: str) -> None:
    """Per-step training loss with per-epoch means overlaid."""
    steps = [r["step"] for r in log_rows if "step" in r]
    losses = [r["loss"] for r in log_rows if "step" in r]
    epoch_rows = [r for r in log_rows if "step" not in r]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(steps, losses, lw=0.9, alpha=0.6, label="step loss")
    if epoch_rows and steps:
        per_epoch = max(1, len(steps) // len(epoch_rows))
        xs = [min(len(steps), (i + 1) * per_epoch) for i in range(len(epoch_rows))]
        ax.plot(xs, [r["loss"] for r in epoch_rows], "o-", ms=3, label="epoch mean")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("cross-entropy loss")
    ax.grid(alpha=0.3)
    ax.legend(loc="upper right")
    fig.suptitle("Training loss")
    _atomic_savefig(fig, path)


def save_confusion_heatmap(cm: ConfusionMatrix, path: str) -> None:
    counts = cm.counts
    k = len(cm.classes)
    fig, ax = plt.subplots(figsize=(1.0 + 0.9 * k, 0.8 + 0.9 * k))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(k), cm.classes, rotation=45, ha="right")
    ax.set_yticks(range(k), cm.classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = counts.max() / 2 if counts.max() else 0.5
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center",
                    color="white" if counts[i, j] > thresh else "black", fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.suptitle(f"Confusion matrix (accuracy {cm.accuracy() * 100.0:.2f}%)")
    _atomic_savefig(fig, path)


def save_ablation_chart(header: list[str], rows: list[dict], axis: str, path: str) -> None:
    """Bar chart of the swept axis: accuracy when present, else parameter count."""
    label_cols = [c for c in header if c not in ("params", "accuracy")]
    labels = ["/".join(str(r[c]) for c in label_cols) or str(i)
              for i, r in enumerate(rows)]
    has_acc = all("accuracy" in r for r in rows)
    values = [r["accuracy"] if has_acc else r["params"] for r in rows]
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(rows), 4.0))
    ax.bar(np.arange(len(rows)), values, color="#3b6ea5")
    ax.set_xticks(np.arange(len(rows)), labels, rotation=30, ha="right")
    ax.set_ylabel("accuracy (%)" if has_acc else "parameter count")
    ax.grid(axis="y", alpha=0.3)
    fig.suptitle(f"Ablation axis: {axis}")
    _atomic_savefig(fig, path)
