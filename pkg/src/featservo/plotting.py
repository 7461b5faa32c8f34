"""Static figures for comparison reports (rendered off-screen)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_results(rows, losses, path) -> None:
    """Bar chart of mean test cost per method and split, plus the dynamics loss curve."""
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(11, 4.2), gridspec_kw={"width_ratios": [2, 1]})
    labels = [f"{r.method}\n({r.split})" for r in rows]
    means = np.array([r.mean_cost for r in rows])
    errs = np.array([r.standard_error for r in rows])
    colors = ["tab:red" if r.split == "novel" else "tab:blue" for r in rows]
    x = np.arange(len(rows))
    ax.bar(x, np.maximum(means, 1e-6), yerr=errs, color=colors, capsize=3)
    ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("mean trajectory cost")
    ax.set_title("test cost (mean and standard error)")

    losses = np.asarray(losses, dtype=np.float64)
    if losses.size:
        k = max(1, losses.size // 100)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax2.plot(np.arange(smooth.size) + k - 1, smooth, color="k", lw=1)
        ax2.set_yscale("log")
    ax2.set_xlabel("iteration")
    ax2.set_title("dynamics training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
