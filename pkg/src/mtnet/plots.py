"""Static SVG figures for evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "mtnet"  # stable element ids


def _means(result) -> tuple[np.ndarray, np.ndarray]:
    t = np.array([r["true_mean_cbf"] for r in result.per_scan])
    p = np.array([r["pred_mean_cbf"] for r in result.per_scan])
    return t, p


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def bland_altman_plot(result, path) -> Path:
    t, p = _means(result)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter((t + p) / 2, t - p, s=12)
    a = result.agreement
    if a is not None:
        ax.axhline(a.bias, color="k", lw=1)
        for v in (a.loa_low, a.loa_high):
            ax.axhline(v, color="k", lw=1, ls="--")
        ax.set_title(a.formatted(), fontsize=9)
    ax.set_xlabel("mean of true and synthetic CBF (ml/100g/min)")
    ax.set_ylabel("true - synthetic (ml/100g/min)")
    fig.tight_layout()
    return _save(fig, path)


def joint_plot(result, path) -> Path:
    t, p = _means(result)
    fig = plt.figure(figsize=(5, 5))
    grid = fig.add_gridspec(2, 2, width_ratios=(4, 1), height_ratios=(1, 4), wspace=0.05, hspace=0.05)
    ax = fig.add_subplot(grid[1, 0])
    top = fig.add_subplot(grid[0, 0], sharex=ax)
    right = fig.add_subplot(grid[1, 1], sharey=ax)
    ax.scatter(t, p, s=12)
    lo, hi = float(min(t.min(), p.min())), float(max(t.max(), p.max()))
    ax.plot([lo, hi], [lo, hi], color="grey", lw=1, ls=":")
    top.hist(t, bins=10)
    right.hist(p, bins=10, orientation="horizontal")
    top.tick_params(labelbottom=False)
    right.tick_params(labelleft=False)
    ax.set_xlabel("true mean CBF (ml/100g/min)")
    ax.set_ylabel("synthetic mean CBF (ml/100g/min)")
    if result.agreement is not None and np.isfinite(result.agreement.pearson_r):
        top.set_title(f"r = {result.agreement.pearson_r:.2f}", fontsize=9)
    return _save(fig, path)


def confusion_matrix_plot(result, path) -> Path:
    from .evaluation import CLASS_NAMES

    counts = result.confusion.counts
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(counts, cmap="Blues")
    for i in range(4):
        for j in range(4):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > counts.max() / 2 else "black")
    ax.set_xticks(range(4), CLASS_NAMES)
    ax.set_yticks(range(4), CLASS_NAMES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)
