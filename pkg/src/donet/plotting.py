"""Figures written next to the CSV/TSV reports."""

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curves(csv_path, png_path):
    """Plot every loss column of a loss-curve CSV against the step number."""
    with open(csv_path, newline="") as fp:
        rows = list(csv.DictReader(fp))
    if not rows:
        return None
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("l1", "l2", "lf", "total"):
        ax.plot(steps, [float(r[key]) for r in rows], label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def _as_rgb(image):
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 1:
        return img[0], "gray"
    return img.transpose(1, 2, 0), None


def prediction_panel(image, triple, png_path, truth=None):
    """Input, both decoder maps and the joint map side by side."""
    panels = [("input", *_as_rgb(image))]
    for name, t in (("y1", triple.y1), ("y2", triple.y2), ("joint", triple.y_joint)):
        if t is not None:
            panels.append((name, t.data[0, 0], "magma"))
    if truth is not None:
        panels.append(("truth", np.asarray(truth).reshape(np.shape(truth)[-2:]), "gray"))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.6))
    for ax, (title, data, cmap) in zip(np.atleast_1d(axes), panels):
        ax.imshow(data, cmap=cmap, vmin=0, vmax=1)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def ablation_chart(rows, png_path, metric="dsc"):
    """Bar chart of mean +- std over seeds for one metric."""
    names = [r.variant for r in rows]
    means = [getattr(r.mean, metric) for r in rows]
    stds = [getattr(r.std, metric) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, means, yerr=stds, capsize=4, color="#4c72b0")
    low = min(means) - 2 * max(stds + [0.01])
    ax.set_ylim(max(0.0, low), 1.0)
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path
