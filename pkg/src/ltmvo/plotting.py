"""Trajectory figures (x-z ground plane), rendered off-screen to SVG."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trajectory import Trajectory  # noqa: E402


def plot_trajectories(path, gt: Trajectory | None = None, est: Trajectory | None = None, title: str = "") -> Path:
    """Top-down x-z view of the estimate against ground truth, saved as SVG."""
    if gt is None and est is None:
        raise ValueError("nothing to plot")
    fig, ax = plt.subplots(figsize=(5, 5))
    if gt is not None:
        p = gt.positions()
        ax.plot(p[:, 0], p[:, 2], color="k", lw=1.5, label="ground truth")
        ax.plot(p[:1, 0], p[:1, 2], "ko", ms=4)
    if est is not None:
        p = est.positions()
        ax.plot(p[:, 0], p[:, 2], color="tab:red", lw=1.2, ls="--", label="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(alpha=0.3)
    ax.legend(loc="best", frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    # fixed hash salt and no date keep the SVG byte-stable across runs
    with matplotlib.rc_context({"svg.hashsalt": "ltmvo"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_loss_curve(path, history, keys=("total",), title: str = "") -> Path:
    """Per-epoch loss curves from a training history."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = [h["epoch"] for h in history]
    for key in keys:
        vals = [h[key] for h in history if key in h]
        if vals:
            ax.plot(epochs[: len(vals)], vals, marker="o", ms=3, label=key)
    ax.set_xlabel("epoch")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    with matplotlib.rc_context({"svg.hashsalt": "ltmvo"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
