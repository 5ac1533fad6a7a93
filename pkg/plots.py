"""Matplotlib figures for run review. Every builder returns a Figure; nothing is shown."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

AXES = ("x", "y", "z")


def trajectory_figure(estimate, ground_truth=None, aligned=None):
    """Top view (x-y) of the estimated path, with ground truth and the aligned estimate if given."""
    fig, ax = plt.subplots(figsize=(6, 5))
    if ground_truth is not None and len(ground_truth):
        ax.plot(ground_truth.position[:, 0], ground_truth.position[:, 1], "k-", lw=1.5, label="ground truth")
    ax.plot(estimate.position[:, 0], estimate.position[:, 1], "-", color="tab:blue", lw=1.0, label="estimate")
    if aligned is not None:
        ax.plot(aligned[:, 0], aligned[:, 1], "--", color="tab:orange", lw=1.0, label="estimate (aligned)")
    if len(estimate):
        ax.plot(*estimate.position[0, :2], "go", label="start")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return fig


def axis_error_figure(times, errors, sigmas=None):
    """Per-axis position error over time; optional 3-sigma envelope from the filter covariance."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 6), sharex=True)
    for i, ax in enumerate(axes):
        ax.plot(times, errors[:, i], color="tab:red", lw=1.0)
        if sigmas is not None:
            t_s, s = sigmas
            ax.fill_between(t_s, -3 * s[:, i], 3 * s[:, i], color="tab:gray", alpha=0.25, lw=0)
        ax.set_ylabel(f"e_{AXES[i]} [m]")
        ax.grid(True, alpha=0.3)
    axes[-1].set_xlabel("t [s]")
    fig.tight_layout()
    return fig


def landmark_figure(points, estimate=None):
    """Top view of the landmark cloud (N x 3 world points)."""
    fig, ax = plt.subplots(figsize=(6, 5))
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points):
        sc = ax.scatter(points[:, 0], points[:, 1], c=points[:, 2], s=3, cmap="viridis")
        fig.colorbar(sc, ax=ax, label="z [m]")
    if estimate is not None and len(estimate):
        ax.plot(estimate.position[:, 0], estimate.position[:, 1], "k-", lw=0.8)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    return fig


def landmark_count_figure(frames):
    """Alive and matched landmarks per frame from report-style per-frame rows (t, landmarks, matched)."""
    fig, ax = plt.subplots(figsize=(7, 3))
    frames = np.asarray(frames, dtype=float).reshape(-1, 3)
    ax.plot(frames[:, 0], frames[:, 1], label="alive")
    ax.plot(frames[:, 0], frames[:, 2], label="matched")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("landmarks")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return fig


def score_map_figure(images, titles):
    """Side-by-side grayscale images (score-map PGMs)."""
    fig, axes = plt.subplots(1, len(images), figsize=(4 * len(images), 3.4), squeeze=False)
    for ax, img, title in zip(axes[0], images, titles):
        ax.imshow(img, cmap="gray", vmin=0, vmax=255)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    return fig
