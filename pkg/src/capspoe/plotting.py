"""Figures written next to the CLI's delimited reports.

All functions render off-screen with the Agg backend and write PNG files
without timestamp metadata, so repeated runs produce identical bytes.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def write_csv(rows, path, columns=None):
    """Write a list of dicts as comma-separated values with a header row."""
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def plot_history(rows, metric, path, title=None, logy=False):
    """Line plot of ``metric`` against ``epoch`` from history rows.

    Args:
        rows: iterable of dicts with an ``epoch`` key.
        metric: name of the column to draw.
        path: output PNG path.
        title: optional axes title.
        logy: use a log-scaled y axis.
    """
    rows = [r for r in rows if metric in r]
    epochs = [r["epoch"] for r in rows]
    values = [r[metric] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(epochs, values, marker="o", markersize=3, linewidth=1.2, color="tab:blue")
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric.replace("_", " "))
        if logy and all(v > 0 for v in values):
            ax.set_yscale("log")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="png", metadata=_PNG_META)
        plt.close(fig)


def plot_image_grid(grid, n_rows, n_cols, path, title=None):
    """Show a tiled grey image with faint tile boundaries."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[0] // n_rows, grid.shape[1] // n_cols
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(2.0, 0.5 * n_cols), max(1.2, 0.5 * n_rows + 0.3)))
        ax.imshow(grid, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_xticks(np.arange(n_cols) * w + w / 2 - 0.5)
        ax.set_xticklabels([str(c) for c in range(n_cols)], fontsize=6)
        ax.set_yticks([])
        ax.grid(False)
        for c in range(1, n_cols):
            ax.axvline(c * w - 0.5, color="tab:red", linewidth=0.3, alpha=0.5)
        for r in range(1, n_rows):
            ax.axhline(r * h - 0.5, color="tab:red", linewidth=0.3, alpha=0.5)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="png", metadata=_PNG_META)
        plt.close(fig)


def plot_gradcheck(rel_errors, tol, path):
    """Histogram of per-entry log10 relative errors with the pass threshold marked."""
    rel = np.asarray(rel_errors, dtype=np.float64).reshape(-1)
    logs = np.log10(np.maximum(rel, 1e-17))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.hist(logs, bins=40, color="tab:gray")
        ax.axvline(np.log10(tol), color="tab:red", linestyle="--", linewidth=1, label=f"tol {tol:g}")
        ax.set_xlabel("log10 relative error")
        ax.set_ylabel("entries")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="png", metadata=_PNG_META)
        plt.close(fig)
