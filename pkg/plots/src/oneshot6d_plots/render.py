"""Matplotlib figure builders with deterministic SVG output."""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

# Deterministic SVG: fixed element-id hash salt and no embedded timestamps,
# so byte-identical inputs produce byte-identical files.
matplotlib.rcParams["svg.hashsalt"] = "oneshot6d-plots"
matplotlib.rcParams["figure.dpi"] = 100
matplotlib.rcParams["font.family"] = "DejaVu Sans"


def save_svg(fig, path: str | Path) -> None:
    """Write ``fig`` as SVG with a fixed creation date, then close it."""
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def threshold_curve_figure(data: dict[str, list[float]]):
    """Recall vs ADD threshold (as a fraction of object diameter)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(data["threshold_frac"], data["recall"], color="#1f5fa8")
    ax.set_xlabel("ADD threshold (fraction of diameter)")
    ax.set_ylabel("recall")
    ax.set_xlim(min(data["threshold_frac"]), max(data["threshold_frac"]))
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def _ablation_figure(x, xlabel, panels):
    fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.0))
    for ax, (y, ylabel, color) in zip(np.atleast_1d(axes), panels):
        ax.plot(x, y, marker="o", color=color)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def pruning_figure(data: dict[str, list[float]]):
    """Recall, rotation error, and matching time vs pruning keep fraction."""
    return _ablation_figure(
        data["keep_fraction"], "keep fraction",
        (
            (data["recall_01d"], "recall @ 0.1 d", "#1f5fa8"),
            (data["median_rot_deg"], "median rotation error (deg)", "#c0622b"),
            (data["matching_seconds"], "matching time (s)", "#3a7d44"),
        ),
    )


def templates_figure(data: dict[str, list[float]]):
    """Recall and rotation error vs template view count."""
    return _ablation_figure(
        data["n_template_views"], "template views",
        (
            (data["recall_01d"], "recall @ 0.1 d", "#1f5fa8"),
            (data["median_rot_deg"], "median rotation error (deg)", "#c0622b"),
        ),
    )


def matches_figure(data: dict[str, list[float]]):
    """Query-pixel match scatter colored by confidence, beside 3D point spread."""
    fig, (ax_px, ax_xy) = plt.subplots(1, 2, figsize=(8.0, 3.6))
    sc = ax_px.scatter(
        data["u"], data["v"], c=data["confidence"], cmap="viridis",
        s=14.0, vmin=0.0, vmax=max(1e-9, max(data["confidence"])),
    )
    ax_px.set_xlabel("u (px)")
    ax_px.set_ylabel("v (px)")
    ax_px.invert_yaxis()
    ax_px.set_title(f"{len(data['u'])} matches")
    fig.colorbar(sc, ax=ax_px, label="confidence")
    ax_xy.scatter(data["x"], data["y"], c="#1f5fa8", s=14.0)
    ax_xy.set_xlabel("x (object)")
    ax_xy.set_ylabel("y (object)")
    ax_xy.set_aspect("equal", adjustable="datalim")
    ax_xy.set_title("matched 3D points (x-y)")
    fig.tight_layout()
    return fig
