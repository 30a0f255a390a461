"""Report figures written next to the CLI's delimited output."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    # fixed metadata keeps repeated renders byte-comparable
    "svg.hashsalt": "tle",
}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None} if path.endswith(".png") else None)
    plt.close(fig)
    return path


def loss_curve(steps, evals, path, window: int = 100):
    """Per-iteration loss with a moving average, plus accuracy per epoch."""
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        it = np.array([s[0] for s in steps])
        loss = np.array([s[2] for s in steps])
        ax1.plot(it, loss, lw=0.5, color="0.7", label="batch loss")
        if loss.size >= window:
            ma = np.convolve(loss, np.ones(window) / window, mode="valid")
            ax1.plot(it[window - 1:], ma, lw=1.2, color="C0", label=f"{window}-iter mean")
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("cross-entropy")
        ax1.legend(frameon=False)
        for split, color in (("train", "C0"), ("test", "C1")):
            pts = [(e, a) for e, s, a in evals if s == split]
            if pts:
                e, a = zip(*pts)
                ax2.plot(e, a, marker=".", color=color, label=split)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0, 1.02)
        ax2.legend(frameon=False)
        return _save(fig, path)


def confusion(labels, pred, class_names, path):
    C = len(class_names)
    mat = np.zeros((C, C), dtype=int)
    np.add.at(mat, (np.asarray(labels), np.asarray(pred)), 1)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(0.5 * C + 2, 0.5 * C + 1.5))
        ax.imshow(mat, cmap="Blues")
        for i in range(C):
            for j in range(C):
                ax.text(j, i, str(mat[i, j]), ha="center", va="center", fontsize=7)
        ax.set_xticks(range(C), class_names, rotation=45, ha="right")
        ax.set_yticks(range(C), class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        return _save(fig, path)


def bench_bars(rows, path):
    """``rows``: (label, feature dim, seconds per map) triples."""
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.8))
        names = [r[0] for r in rows]
        ax1.bar(names, [r[1] for r in rows], color=["C0", "C1"][:len(rows)])
        ax1.set_yscale("log")
        ax1.set_ylabel("feature dimension")
        for i, r in enumerate(rows):
            ax1.text(i, r[1], f"{r[1]:,}", ha="center", va="bottom", fontsize=7)
        ax2.bar(names, [1e3 * r[2] for r in rows], color=["C0", "C1"][:len(rows)])
        ax2.set_ylabel("ms per map")
        return _save(fig, path)


def fusion_bars(accs: dict, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.5, 2.6))
        ax.bar(list(accs), list(accs.values()), color=["C0", "C1", "C2"][:len(accs)])
        ax.set_ylim(0, 1.02)
        ax.set_ylabel("accuracy")
        return _save(fig, path)


def aggregation_bars(results: dict, path):
    """``results``: mode -> list of per-seed accuracies."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.8, 2.8))
        modes = list(results)
        means = [float(np.mean(results[m])) for m in modes]
        ax.bar(modes, means, color="0.75")
        for i, m in enumerate(modes):
            ax.plot([i] * len(results[m]), results[m], "k.", ms=4)
        ax.set_ylim(0, 1.02)
        ax.set_ylabel("test accuracy")
        return _save(fig, path)
