"""Figures written next to the CSV outputs (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def _save(fig, path) -> None:
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)


def plot_losses(report, path) -> None:
    """Per-epoch mean of every active loss term."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key in ("l_rec", "l_prior", "l_adv", "l_dis"):
        vals = report.epoch_means(key)
        if vals and not all(np.isnan(vals)):
            ax.plot(np.arange(1, len(vals) + 1), vals, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("symlog", linthresh=1.0)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_histogram(edges, count_normal, count_anomalous, threshold, path) -> None:
    """Normalised residual histograms for normal and lesion voxels."""
    edges = np.asarray(edges)
    centres = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for counts, label, colour in ((count_normal, "normal", "tab:blue"),
                                  (count_anomalous, "lesion", "tab:red")):
        counts = np.asarray(counts, dtype=float)
        total = counts.sum()
        ax.bar(centres, counts / total if total else counts, width=width, alpha=0.55,
               color=colour, label=label)
    ax.axvline(threshold, color="k", ls="--", lw=1, label="threshold")
    ax.set_xlabel("|x - x_hat|")
    ax.set_ylabel("fraction of voxels")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_examples(rows, path) -> None:
    """rows: (patient id, image, reconstruction, residual, predicted mask, true mask) at one slice."""
    n = max(1, len(rows))
    fig, axes = plt.subplots(n, 4, figsize=(8, 2.1 * n), squeeze=False)
    titles = ("input", "reconstruction", "residual", "prediction / truth")
    for i, (pid, img, rec, res, pred, truth) in enumerate(rows):
        axes[i, 0].imshow(img, cmap="gray", vmin=0, vmax=1)
        axes[i, 1].imshow(rec, cmap="gray", vmin=0, vmax=1)
        axes[i, 2].imshow(res, cmap="magma", vmin=0)
        axes[i, 3].imshow(img, cmap="gray", vmin=0, vmax=1)
        axes[i, 3].contour(truth, levels=[0.5], colors="lime", linewidths=0.8)
        if pred.any():
            axes[i, 3].contour(pred, levels=[0.5], colors="red", linewidths=0.8)
        axes[i, 0].set_ylabel(pid, fontsize=7)
        for j, ax in enumerate(axes[i]):
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(titles[j], fontsize=8)
    _save(fig, path)
