"""Minimal deterministic SVG bar charts with error whiskers."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "stagedik"
matplotlib.rcParams["svg.fonttype"] = "none"


def bar_chart(path, labels, means, stds=None, ylabel="", title=""):
    """Bars at ``means`` with ``stds`` whiskers, written to an SVG file.

    NaN bars are drawn empty. The output carries no timestamp, so identical
    inputs give byte-identical files.
    """
    means = np.asarray(means, float)
    stds = np.zeros_like(means) if stds is None else np.asarray(stds, float)
    width = max(4.0, 0.45 * len(labels) + 1.5)
    fig, ax = plt.subplots(figsize=(width, 3.2))
    x = np.arange(len(labels))
    ax.bar(x, np.nan_to_num(means), yerr=np.nan_to_num(stds), capsize=3,
           color="#4c72b0", edgecolor="black", linewidth=0.5)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45 if len(labels) > 6 else 0, ha="right" if len(labels) > 6 else "center")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
