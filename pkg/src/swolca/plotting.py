"""Static SVG figures of the estimated item patterns."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

LEVEL_COLORS = ("#f7fbff", "#9ecae1", "#4292c6", "#08306b")
_RC = {"svg.hashsalt": "swolca-patterns", "svg.fonttype": "path"}


def _save(fig, path):
    with plt.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def modal_levels(theta, levels):
    """1-based argmax level per (item, class); theta is (J, K, R)."""
    theta = np.asarray(theta, dtype=float)
    mask = np.arange(theta.shape[2])[None, None, :] < np.asarray(levels)[:, None, None]
    return np.where(mask, theta, -np.inf).argmax(axis=2) + 1


def plot_patterns(theta, levels, path, item_names=None):
    """Heatmap of the modal level per item (rows) and class (columns)."""
    modal = modal_levels(theta, levels)
    J, K = modal.shape
    R = int(np.max(levels))
    colors = list(LEVEL_COLORS[:R]) if R <= len(LEVEL_COLORS) else plt.get_cmap("Blues")(np.linspace(0.05, 1, R))
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * K, 1.0 + 0.22 * J))
    ax.imshow(modal, cmap=ListedColormap(colors), vmin=0.5, vmax=R + 0.5, aspect="auto")
    ax.set_xticks(range(K), [f"Class {k + 1}" for k in range(K)])
    names = item_names or [f"item_{j + 1}" for j in range(J)]
    ax.set_yticks(range(J), names, fontsize=7)
    ax.set_xlabel("Latent class")
    ax.set_title("Modal level")
    handles = [Patch(facecolor=colors[r], edgecolor="grey", label=f"Level {r + 1}") for r in range(R)]
    ax.legend(handles=handles, loc="upper left", bbox_to_anchor=(1.02, 1.0), fontsize=7, frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_probabilities(theta, levels, path):
    """Stacked bars of the level probabilities for every item, one panel per class."""
    theta = np.asarray(theta, dtype=float)
    J, K, R = theta.shape
    fig, axes = plt.subplots(K, 1, figsize=(0.25 * J + 2, 1.6 * K), sharex=True, squeeze=False)
    x = np.arange(J)
    for k, ax in enumerate(axes[:, 0]):
        bottom = np.zeros(J)
        for r in range(R):
            vals = np.where(r < np.asarray(levels), theta[:, k, r], 0.0)
            ax.bar(x, vals, bottom=bottom, color=LEVEL_COLORS[r % len(LEVEL_COLORS)], edgecolor="grey",
                   linewidth=0.3, label=f"Level {r + 1}")
            bottom += vals
        ax.set_ylim(0, 1)
        ax.set_ylabel(f"Class {k + 1}", fontsize=8)
    axes[-1, 0].set_xticks(x, [str(j + 1) for j in x], fontsize=6)
    axes[-1, 0].set_xlabel("Item")
    axes[0, 0].legend(loc="upper left", bbox_to_anchor=(1.01, 1.0), fontsize=7, frameon=False)
    fig.tight_layout()
    _save(fig, path)
