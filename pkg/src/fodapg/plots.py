"""Stage figures, rendered headless next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

PNG_META = {"Software": "fodapg"}   # fixed so re-runs produce identical bytes


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)
    return path


def loss_curve(history, path):
    """Training loss and validation CIDEr over epochs, twin axes."""
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(epochs, [row["loss"] for row in history], color="tab:blue",
            marker="o", markersize=3, label="train NLL")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean NLL", color="tab:blue")
    twin = ax.twinx()
    twin.plot(epochs, [row["val_cider"] for row in history], color="tab:orange",
              marker="s", markersize=3, label="val CIDEr")
    twin.set_ylabel("validation CIDEr", color="tab:orange")
    ax.set_title("training curve")
    return _finish(fig, path)


def metric_bars(report, path):
    """One bar per corpus metric; CIDEr shown on its /10 scale."""
    d = report.to_dict()
    labels, values = [], []
    for key in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor_lite",
                "ce_precision", "ce_recall", "ce_f1"):
        labels.append(key)
        values.append(d[key])
    labels.append("cider/10")
    values.append(d["cider"] / 10.0)
    fig, ax = plt.subplots(figsize=(7.0, 3.6))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("score")
    ax.set_title("corpus metrics")
    return _finish(fig, path)


def rank_frequency_plot(freqs, path):
    """Log-log finding frequency by rank (the corpus long tail)."""
    counts = [c for _, c in freqs] or [1]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.loglog(np.arange(1, len(counts) + 1), counts, marker="o",
              markersize=3, linestyle="-", color="tab:blue")
    ax.set_xlabel("finding rank")
    ax.set_ylabel("studies")
    ax.set_title("finding rank-frequency")
    return _finish(fig, path)


def graph_overview(class_counts, degrees, path):
    """Node class breakdown plus the degree histogram side by side."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(8.0, 3.4))
    names = sorted(class_counts)
    left.bar(range(len(names)), [class_counts[n] for n in names],
             color="tab:blue")
    left.set_xticks(range(len(names)))
    left.set_xticklabels(names, rotation=20, ha="right")
    left.set_ylabel("nodes")
    left.set_title("node classes")
    degrees = np.asarray(degrees, dtype=int)
    upper = int(degrees.max()) if degrees.size else 1
    right.hist(degrees, bins=np.arange(0, upper + 2) - 0.5, color="tab:orange")
    right.set_xlabel("degree")
    right.set_ylabel("nodes")
    right.set_title("degree distribution")
    return _finish(fig, path)
