"""Figure rendering for the report-producing commands.

Every figure is written next to the delimited output it illustrates, with
fixed size, dpi and metadata so repeated runs are byte-identical.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = dict(dpi=120, metadata={"Software": "signmap"})

_MARKERS = ("o", "s", "^", "v", "D", "x", "+")
_COLORS = ("tab:green", "tab:red", "tab:blue", "tab:orange", "tab:purple")


def save_sign_map(path, layers, title="sign map"):
    """Top-down east/north scatter of one or more point layers.

    layers: list of (label, positions) with positions an (n, >=2) array.
    """
    fig, ax = plt.subplots(figsize=(6.0, 6.0))
    for i, (label, positions) in enumerate(layers):
        positions = np.asarray(positions, dtype=float)
        if positions.size == 0:
            positions = np.zeros((0, 2))
        ax.scatter(positions[:, 0], positions[:, 1],
                   marker=_MARKERS[i % len(_MARKERS)],
                   color=_COLORS[i % len(_COLORS)],
                   s=36, label=f"{label} ({len(positions)})", alpha=0.8)
    ax.set_xlabel("east [m]")
    ax.set_ylabel("north [m]")
    ax.set_title(title)
    ax.axis("equal")
    ax.grid(True, alpha=0.3)
    if layers:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_trajectory(path, estimated, reference, title="estimated vs reference"):
    fig, ax = plt.subplots(figsize=(6.0, 6.0))
    estimated = np.asarray(estimated, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if reference.size:
        ax.plot(reference[:, 0], reference[:, 1], "-", color="tab:red",
                label=f"reference ({len(reference)})", linewidth=1.2)
    if estimated.size:
        ax.scatter(estimated[:, 0], estimated[:, 1], s=8, color="tab:blue",
                   label=f"estimated ({len(estimated)})", alpha=0.7)
    ax.set_xlabel("east [m]")
    ax.set_ylabel("north [m]")
    ax.set_title(title)
    ax.axis("equal")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_error_histogram(path, values, title="error distribution", xlabel="error [m]"):
    values = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if values.size:
        ax.hist(values, bins=min(30, max(5, values.size // 4)), color="tab:blue",
                edgecolor="white")
        ax.axvline(float(np.median(values)), color="tab:red", linestyle="--",
                   label=f"median {np.median(values):.2f}")
        ax.legend(fontsize=8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_confusion_matrix(path, cm, title="change detection"):
    grid = np.array([[cm.tp, cm.fn], [cm.fp, cm.tn]], dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    ax.imshow(grid, cmap="Blues", vmin=0, vmax=max(1.0, grid.max()))
    for (i, j), value in np.ndenumerate(grid):
        ax.text(j, i, str(int(value)), ha="center", va="center", fontsize=14)
    ax.set_xticks([0, 1], ["change", "no change"])
    ax.set_yticks([0, 1], ["change", "no change"])
    ax.set_xlabel("reported")
    ax.set_ylabel("ground truth")
    ax.set_title(f"{title} (accuracy {cm.accuracy:.2f})" if cm.total else title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_channel_errors(path, channel_errors, title="per-channel errors"):
    names = list(channel_errors.abs_error)
    abs_vals = [channel_errors.abs_error[n] for n in names]
    rel_vals = [channel_errors.rel_error[n] for n in names]
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 4.0))
    ax1.bar(x, abs_vals, color="tab:blue")
    ax1.set_xticks(x, names)
    ax1.set_ylabel("absolute error [m]")
    ax2.bar(x, rel_vals, color="tab:orange")
    ax2.set_xticks(x, names)
    ax2.set_ylabel("relative error")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
