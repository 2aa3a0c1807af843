"""SVG figures drawn from metric CSVs and latent samples."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed hash salt keeps the SVG bytes identical across runs
matplotlib.rcParams["svg.hashsalt"] = "ivae"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def pair_plot(points: np.ndarray, path, labels=None, names: Sequence[str] | None = None,
              max_dims: int = 4) -> Path:
    """Scatter matrix of the first ``max_dims`` columns, histograms on the diagonal."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("pair_plot expects a 2-D array")
    k = min(points.shape[1], max_dims)
    names = list(names) if names is not None else [f"z{i}" for i in range(k)]
    fig, axes = plt.subplots(k, k, figsize=(2.2 * k, 2.2 * k), squeeze=False)
    for i in range(k):
        for j in range(k):
            ax = axes[i][j]
            if i == j:
                ax.hist(points[:, i], bins=30, color="0.4")
            else:
                if labels is None:
                    ax.scatter(points[:, j], points[:, i], s=3, color="0.3", linewidths=0)
                else:
                    ax.scatter(points[:, j], points[:, i], c=labels, s=3, cmap="tab10", linewidths=0)
            if i == k - 1:
                ax.set_xlabel(names[j])
            if j == 0:
                ax.set_ylabel(names[i])
            ax.tick_params(labelsize=6)
    fig.tight_layout()
    return _save(fig, path)


def read_metric_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [dict(r, value=float(r["value"])) for r in csv.DictReader(fh)]


def parallel_coordinates(rows: Sequence[dict], path, axis_key: str = "target", line_key: str = "evidence",
                         metric: str | None = None) -> Path:
    """One polyline per ``line_key`` value across the ``axis_key`` columns."""
    if metric is not None:
        rows = [r for r in rows if r.get("metric") == metric]
    if not rows:
        raise ValueError("no rows to plot")
    axes_names = list(dict.fromkeys(r[axis_key] for r in rows))
    lines = list(dict.fromkeys(r[line_key] for r in rows))
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(axes_names), 3.5))
    xs = np.arange(len(axes_names))
    for name in lines:
        vals = {r[axis_key]: r["value"] for r in rows if r[line_key] == name}
        ys = [vals.get(a, np.nan) for a in axes_names]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xticks(xs)
    ax.set_xticklabels(axes_names)
    for x in xs:
        ax.axvline(x, color="0.8", lw=0.8, zorder=0)
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    return _save(fig, path)
