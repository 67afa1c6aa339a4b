"""Figure rendering for run artifacts.

Every function draws a static matplotlib figure straight to a file next
to the delimited output, without touching pyplot global state. PNG
metadata is stripped so the same inputs always produce the same bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .metrics import METRICS, UNITS, Comparison, TrackingReport

_SAVE = {"dpi": 110, "metadata": {"Software": None}}
_BAR = "#4878a8"
_WIN = "#2a9d3a"
_DIM = "#b0b6bd"


def _metric_grid(fig_width: float = 13.0) -> tuple[Figure, np.ndarray]:
    fig = Figure(figsize=(fig_width, 8.5))
    axes = fig.subplots(3, 4)
    return fig, axes.ravel()


def _style(ax, metric: str) -> None:
    unit = UNITS[metric]
    ax.set_title(f"{metric} [{unit}]" if unit else metric, fontsize=10)
    ax.tick_params(labelsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    if metric == "survival":
        ax.set_ylim(0.0, 1.05)


def render_report(report: TrackingReport, path: str | Path) -> Path:
    """One panel per metric, one bar per clip, dataset mean as a dashed
    line. Metrics the mask actively tracks are titled with a ``+``."""
    path = Path(path)
    names = [row["clip"] for row in report.clips]
    fig, axes = _metric_grid()
    for ax, m in zip(axes, METRICS):
        vals = [row[m] for row in report.clips]
        ax.bar(range(len(names)), vals, color=_BAR)
        ax.axhline(report.summary[m], color="black", lw=0.8, ls="--")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        _style(ax, m)
        if m in report.active:
            ax.set_title(ax.get_title() + " +", fontsize=10)
    fig.suptitle(f"tracking metrics (mask: {report.mask_label}, "
                 f"{report.episodes_per_clip} episodes/clip)", fontsize=12)
    fig.tight_layout(rect=(0, 0, 1, 0.96))
    fig.savefig(path, **_SAVE)
    return path


def render_comparison(cmp: Comparison, path: str | Path) -> Path:
    """One panel per metric, one bar per method; the winning bar is
    highlighted, ties stay uniform."""
    path = Path(path)
    fig, axes = _metric_grid()
    for ax, m in zip(axes, METRICS):
        colors = [_WIN if cmp.winners[m] == n else _DIM for n in cmp.names]
        vals = [cmp.values[n][m] for n in cmp.names]
        ax.bar(range(len(cmp.names)), vals, color=colors)
        ax.set_xticks(range(len(cmp.names)))
        ax.set_xticklabels(cmp.names, rotation=45, ha="right", fontsize=7)
        _style(ax, m)
        if m in cmp.active:
            ax.set_title(ax.get_title() + " +", fontsize=10)
    fig.suptitle("method comparison (green = column winner, + = actively "
                 "tracked)", fontsize=12)
    fig.tight_layout(rect=(0, 0, 1, 0.96))
    fig.savefig(path, **_SAVE)
    return path


def render_training_curves(records: list[dict], path: str | Path) -> Path:
    """Reward, tracking error, survival, and approximate KL against
    environment steps, from the trainer's metric log."""
    path = Path(path)
    steps = [r["step"] for r in records]
    panels = (("reward", "mean step reward"),
              ("tracking_error", "mean keypoint error [m]"),
              ("survival", "survival rate"),
              ("ppo/approx_kl", "approximate KL per update"))
    fig = Figure(figsize=(11.0, 7.0))
    axes = fig.subplots(2, 2).ravel()
    for ax, (key, label) in zip(axes, panels):
        ax.plot(steps, [r[key] for r in records], color=_BAR)
        ax.set_title(label, fontsize=10)
        ax.set_xlabel("environment steps", fontsize=8)
        ax.tick_params(labelsize=8)
        ax.grid(True, alpha=0.3)
    axes[2].set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    return path


def render_distill_curves(records: list[dict], path: str | Path) -> Path:
    """Imitation loss per iteration (log scale) next to the cumulative
    mask mode coverage fractions."""
    path = Path(path)
    its = [r["iteration"] for r in records]
    fig = Figure(figsize=(11.0, 4.5))
    ax_loss, ax_cov = fig.subplots(1, 2)
    ax_loss.plot(its, [r["loss"] for r in records], color=_BAR,
                 label="iteration mean")
    ax_loss.plot(its, [r["loss_final"] for r in records], color=_WIN,
                 lw=0.9, label="final minibatch")
    ax_loss.set_yscale("log")
    ax_loss.set_title("imitation loss", fontsize=10)
    ax_loss.set_xlabel("iteration", fontsize=8)
    ax_loss.legend(fontsize=8)
    ax_loss.grid(True, alpha=0.3)
    cov_keys = sorted(k for k in records[0] if k.startswith("mask/"))
    for key in cov_keys:
        ax_cov.plot(its, [r[key] for r in records], label=key[5:])
    ax_cov.set_ylim(0.0, 1.05)
    ax_cov.set_title("episode mode coverage (cumulative)", fontsize=10)
    ax_cov.set_xlabel("iteration", fontsize=8)
    ax_cov.legend(fontsize=7)
    ax_cov.grid(True, alpha=0.3)
    for ax in (ax_loss, ax_cov):
        ax.tick_params(labelsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    return path
