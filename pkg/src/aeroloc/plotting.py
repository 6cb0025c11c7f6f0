"""Report figures rendered straight to PNG files.

Uses the object API with an Agg canvas so no global pyplot state is touched
and repeated runs produce identical bytes.
"""

from __future__ import annotations

import io
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .formats import atomic_write
from .geometry import SE2Pose

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
PNG_METADATA = {"Software": None}


def new_figure(width: float = 6.0, height: Optional[float] = None, ncols: int = 1):
    """Figure and axes with a light, print-friendly style."""
    fig = Figure(figsize=(width, height or width * GOLDEN), dpi=100, facecolor="w")
    FigureCanvasAgg(fig)
    axes = [fig.add_subplot(1, ncols, k + 1) for k in range(ncols)]
    for ax in axes:
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
        ax.tick_params(labelsize=9)
        ax.grid(True, linewidth=0.4, alpha=0.5)
    return fig, axes


def figure_bytes(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=PNG_METADATA)
    return buf.getvalue()


def save_figure(fig, path) -> None:
    atomic_write(Path(path), figure_bytes(fig))


def plot_error_cdf(ax, errors: np.ndarray, label: str, thresholds: Sequence[float] = ()) -> None:
    e = np.sort(np.asarray(errors, dtype=np.float64))
    frac = np.arange(1, len(e) + 1) / max(len(e), 1)
    ax.step(e, 100.0 * frac, where="post", label=label, linewidth=1.2)
    for t in thresholds:
        ax.axvline(t, color="0.6", linestyle=":", linewidth=0.8)
    ax.set_xlabel("error [m]", fontsize=10)
    ax.set_ylabel("recall [%]", fontsize=10)
    ax.set_ylim(0, 100)


def plot_trajectories(ax, gt: Sequence[SE2Pose], pred: Sequence[SE2Pose], label: str = "prediction") -> None:
    g = np.array([[p.x, p.y] for p in gt])
    q = np.array([[p.x, p.y] for p in pred])
    ax.plot(g[:, 0], g[:, 1], color="k", linewidth=1.0, label="ground truth")
    ax.plot(q[:, 0], q[:, 1], ".", markersize=2.5, color="tab:red", label=label)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]", fontsize=10)
    ax.set_ylabel("y [m]", fontsize=10)


def report_figure(report, gt: Sequence[SE2Pose], pred: Sequence[SE2Pose], label: str = "prediction"):
    """Error CDFs (lateral, longitudinal, position) beside the trajectory overlay."""
    fig, (ax_cdf, ax_traj) = new_figure(10.0, 4.0, ncols=2)
    plot_error_cdf(ax_cdf, report.lateral, "lateral", report.thresholds)
    plot_error_cdf(ax_cdf, report.longitudinal, "longitudinal")
    plot_error_cdf(ax_cdf, report.position, "position")
    ax_cdf.legend(fontsize=8, frameon=False, loc="lower right")
    ax_cdf.set_xlim(0, max(max(report.thresholds) * 1.2, float(report.position.max()) * 1.05 + 1e-9))
    plot_trajectories(ax_traj, gt, pred, label)
    ax_traj.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    return fig


def heatmap_figure(marginal: np.ndarray, resolution: float, title: str = ""):
    fig, (ax,) = new_figure(4.0, 4.0)
    ax.grid(False)
    half = (marginal.shape[0] - 1) / 2.0 * resolution
    im = ax.imshow(marginal, origin="lower", extent=(-half, half, -half, half), cmap="magma")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xlabel("x [m]", fontsize=10)
    ax.set_ylabel("y [m]", fontsize=10)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    return fig
