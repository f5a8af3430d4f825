"""Figure rendering for run artifacts.

Every CSV the CLI writes has a matching PNG renderer here; all plotting
uses the Agg backend so reports work on headless machines.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402

from .evaluation import ConfidenceHistogram, ProbeReport  # noqa: E402


def _float_or_none(s):
    return None if s == "" else float(s)


def read_metrics_csv(path):
    """Rows of the training metrics file as dicts with parsed numbers."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {"epoch": int(raw["epoch"])}
            for key in ("ce", "order", "debias", "flow", "total", "train_acc",
                        "test_acc_original", "test_acc_shuffled", "gap"):
                row[key] = _float_or_none(raw[key])
            rows.append(row)
    return rows


def plot_metrics(rows, out_png):
    """Two panels: loss components and accuracy curves over epochs."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(11, 4))

    for key in ("ce", "order", "debias", "flow", "total"):
        ax_loss.plot(epochs, [r[key] for r in rows], label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_title("training losses")
    ax_loss.legend(fontsize=8)

    ax_acc.plot(epochs, [r["train_acc"] for r in rows], label="train")
    ax_acc.plot(epochs, [r["test_acc_original"] for r in rows], label="test original")
    if rows and rows[0]["test_acc_shuffled"] is not None:
        ax_acc.plot(epochs, [r["test_acc_shuffled"] for r in rows],
                    label="test shuffled")
        ax_acc.plot(epochs, [r["gap"] for r in rows], linestyle="--", label="gap")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("percent")
    ax_acc.set_title("accuracy")
    ax_acc.legend(fontsize=8)

    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_histogram(hist: ConfidenceHistogram, out_png, title="confidence gap"):
    edges = ConfidenceHistogram.edges()
    centers = (edges[:-1] + edges[1:]) / 2.0
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers, hist.masses, width=0.095, align="center")
    ax.axvline(hist.mean_gap, color="crimson", linestyle="--",
               label=f"mean {hist.mean_gap:+.3f}")
    ax.set_xlabel("conf(original) - conf(shuffled)")
    ax.set_ylabel("mass")
    ax.set_title(title)
    ax.set_xlim(-1.05, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_mode_accuracies(accuracies, out_png, title="accuracy by background mode"):
    """Bar chart over evaluation modes; `accuracies` maps mode -> percent."""
    names = list(accuracies)
    values = [accuracies[n] for n in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(len(names)), values, color="steelblue")
    ax.set_xticks(np.arange(len(names)), names, rotation=20)
    ax.set_ylabel("top-1 (%)")
    ax.set_ylim(0, 105)
    ax.set_title(title)
    for i, v in enumerate(values):
        ax.text(i, v + 1.5, f"{v:.1f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_probe(report: ProbeReport, out_png, chance=None):
    blocks = np.arange(1, report.depth + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(blocks, report.accuracies, marker="o")
    if chance is not None:
        ax.axhline(chance, color="gray", linestyle=":", label=f"chance {chance:.1f}%")
        ax.legend(fontsize=8)
    ax.set_xticks(blocks)
    ax.set_xlabel("encoder block")
    ax.set_ylabel("order-probe accuracy (%)")
    ax.set_ylim(0, 105)
    ax.set_title("temporal order decodability by depth")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
