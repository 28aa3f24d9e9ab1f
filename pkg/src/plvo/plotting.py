"""Matplotlib figures for trajectories, APE series, match statistics and loss curves.

Figures are written as SVG with a fixed hash salt and no timestamp, so
re-running a workflow reproduces them byte for byte.
"""
from __future__ import annotations

import io
from math import sqrt
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .feature_codec import atomic_write_text  # noqa: E402

GOLDEN = (sqrt(5.0) - 1.0) / 2.0
WIDTH_IN = 6.0

STYLE = {
    "svg.hashsalt": "plvo",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "figure.figsize": (WIDTH_IN, WIDTH_IN * GOLDEN),
}


def new_figure(scale=1.0, aspect=GOLDEN):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(WIDTH_IN * scale, WIDTH_IN * scale * aspect))
    return fig, ax


def save_svg(fig, path) -> None:
    """Deterministic SVG written atomically."""
    buf = io.StringIO()
    with plt.rc_context(STYLE):
        fig.savefig(buf, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    atomic_write_text(Path(path), buf.getvalue())


def plot_trajectories(path, estimated, ground_truth=None, title="Trajectory (top view)"):
    """Top-down x/z view of one or more trajectories.

    ``estimated`` maps a label to an (n, 3) position array.
    """
    fig, ax = new_figure(aspect=0.8)
    with plt.rc_context(STYLE):
        if ground_truth is not None:
            gt = np.asarray(ground_truth)
            ax.plot(gt[:, 0], gt[:, 2], color="0.2", ls="--", label="ground truth")
        for label, pos in estimated.items():
            pos = np.asarray(pos)
            ax.plot(pos[:, 0], pos[:, 2], label=label)
        ax.set_xlabel("x (m)")
        ax.set_ylabel("z (m)")
        ax.set_title(title)
        ax.set_aspect("equal", adjustable="datalim")
        ax.legend(frameon=False)
    save_svg(fig, path)


def plot_ape(path, series, title="Absolute position error"):
    """``series`` maps a label to ``(frame_ids, errors)``."""
    fig, ax = new_figure()
    with plt.rc_context(STYLE):
        for label, (frames, err) in series.items():
            ax.plot(frames, err, label=label)
        ax.set_xlabel("frame")
        ax.set_ylabel("APE (m)")
        ax.set_title(title)
        ax.legend(frameon=False)
    save_svg(fig, path)


def plot_match_stats(path, stats, title="Detections and matches"):
    """Grouped bars per run; ``stats`` maps a label to a MatchStats."""
    labels = list(stats)
    x = np.arange(len(labels))
    width = 0.2
    fig, ax = new_figure()
    with plt.rc_context(STYLE):
        cols = [("point_detections", "P-point D"), ("point_matches", "P-point M"),
                ("line_detections", "line D"), ("line_matches", "line M")]
        for k, (attr, name) in enumerate(cols):
            ax.bar(x + (k - 1.5) * width, [getattr(stats[l], attr) for l in labels], width,
                   label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_ylabel("count")
        ax.set_title(title)
        ax.legend(frameon=False, ncol=2)
    save_svg(fig, path)


def plot_loss(path, losses, window=25, title="Training loss"):
    losses = np.asarray(losses, dtype=float)
    fig, ax = new_figure()
    with plt.rc_context(STYLE):
        steps = np.arange(len(losses))
        ax.plot(steps, losses, color="0.75", lw=0.8, label="per step")
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1:], smooth, label=f"moving mean ({window})")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False)
    save_svg(fig, path)
