"""Figure rendering for the CLI report paths.

Figures are rendered to PNG next to the CSV/JSONL artifacts they
visualize; the delimited files stay the canonical output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def training_curves(reports, path: str) -> None:
    epochs = [r.epoch for r in reports]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(epochs, [r.extras.get("train_loss_mean", np.nan) for r in reports], marker="o")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("mean train loss")
    axes[1].plot(epochs, [r.recall_at.get(1, np.nan) for r in reports], marker="o", label="recall@1")
    axes[1].plot(epochs, [r.nmi for r in reports], marker="s", label="NMI")
    axes[1].plot(epochs, [r.f1 for r in reports], marker="^", label="F1")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylim(0, 1.05)
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def label_certainty_curves(reports, path: str) -> None:
    pts = [(r.epoch, r.extras["syn_recall_at_1"], r.extras["ori_recall_at_1"])
           for r in reports if "syn_recall_at_1" in r.extras]
    if not pts:
        return
    epochs, syn, ori = zip(*pts)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, syn, marker="o", label="synthetic queries")
    ax.plot(epochs, ori, marker="s", label="original queries")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train recall@1")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ratio_curve(steps, ratios, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, ratios, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("synthetic selection ratio")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_curves(rows: list[dict], path: str) -> None:
    """Recall@1 against n, one line per (loss, normalize) combination."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    combos = sorted({(r["loss"], r["normalize"]) for r in rows})
    for loss, norm in combos:
        pts = sorted(
            (r["n"], r["recall_at_1_mean"], r["recall_at_1_std"])
            for r in rows
            if r["loss"] == loss and r["normalize"] == norm
        )
        ns, means, stds = zip(*pts)
        label = f"{loss} ({'with' if norm else 'no'} L2)"
        ax.errorbar(ns, means, yerr=stds, marker="o", capsize=3, label=label)
    ax.set_xlabel("synthetic points per pair")
    ax.set_ylabel("test recall@1")
    ax.set_xscale("log", base=2)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bench_curves(rows: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for size in sorted({r["batch_size"] for r in rows}):
        pts = sorted((r["n"], r["gen_ms"], r["total_ms"]) for r in rows if r["batch_size"] == size)
        ns, gen, total = zip(*pts)
        ax.plot(ns, total, marker="o", label=f"total, batch {size}")
        ax.plot(ns, gen, marker="s", ls="--", label=f"gen, batch {size}")
    ax.set_xlabel("synthetic points per pair")
    ax.set_ylabel("median time (ms)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def heatmap(matrix: np.ndarray, path: str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(matrix, cmap="jet", vmin=0.0, vmax=1.0)
    ax.set_xlabel("second samples")
    ax.set_ylabel("first samples")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
