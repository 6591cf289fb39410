"""Figure rendering for run reports.

Every CLI report path writes a PNG beside its delimited output: pattern
overlays for refinement runs, a labelled scatter for embedding exports,
grouped bars for quality metrics and loss/accuracy curves for training.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import DiffMetrics, MetricsReport


def plot_refinement_examples(raw, refined, ground_truth, labels, path,
                             max_samples: int = 6) -> None:
    """Overlay raw/refined(/ground-truth) curves for the first few samples."""
    raw = np.asarray(raw)
    n = min(max_samples, raw.shape[0])
    fig, axes = plt.subplots(n, 1, figsize=(8, 1.8 * n), sharex=True, squeeze=False)
    for i in range(n):
        ax = axes[i, 0]
        ax.plot(raw[i], color="0.6", lw=0.8, label="raw")
        ax.plot(refined[i], color="tab:red", lw=0.9, label="refined")
        if ground_truth is not None:
            ax.plot(ground_truth[i], color="tab:blue", lw=0.8, ls="--",
                    label="ground truth")
        ax.set_ylabel(f"class {int(labels[i])}", fontsize=8)
        ax.set_ylim(-0.05, 1.05)
        if i == 0:
            ax.legend(loc="upper right", fontsize=7, ncol=3)
    axes[-1, 0].set_xlabel("position")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_embeddings(projected, labels, path) -> None:
    """Scatter of the 2-D embedding projection, one colour per class."""
    projected = np.asarray(projected)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(6, 5))
    for k in sorted(set(labels.tolist())):
        mask = labels == k
        ax.scatter(projected[mask, 0], projected[mask, 1], s=12,
                   label=f"class {k}", alpha=0.8)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics_summary(report: MetricsReport, path) -> None:
    """Grouped raw-vs-refined bars for the mean and median of each metric."""
    agg = report.aggregates()
    names = DiffMetrics._fields
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    width = 0.38
    x = np.arange(len(names))
    for ax, stat in zip(axes, ("mean", "median")):
        raw_vals = [agg[f"raw_{m}"][stat] for m in names]
        ref_vals = [agg[f"refined_{m}"][stat] for m in names]
        ax.bar(x - width / 2, raw_vals, width, label="raw", color="0.6")
        ax.bar(x + width / 2, ref_vals, width, label="refined", color="tab:red")
        ax.set_xticks(x, names)
        ax.set_title(stat)
        ax.legend(fontsize=8)
    fig.suptitle(f"accuracy: raw {report.accuracy_raw:.3f}, "
                 f"refined {report.accuracy_refined:.3f}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curves(history, path) -> None:
    """Loss on the left axis, accuracy on the right, one point per epoch."""
    epochs = [s.epoch for s in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [s.loss for s in history], color="tab:red", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    twin = ax.twinx()
    twin.plot(epochs, [s.accuracy for s in history], color="tab:blue",
              label="accuracy")
    twin.set_ylabel("accuracy")
    twin.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
