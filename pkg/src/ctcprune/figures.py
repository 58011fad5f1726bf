"""Figure rendering for the report outputs.

Every tabular artifact the CLI writes gets a PNG next to it.  Rendering is
strictly one-way (figures are derived from the already-written data), uses
the Agg backend, and never influences any numeric output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import BenchRow
from .prune import CandidateScore
from .train import CurveRow


def render_similarity_heatmap(matrix: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis", origin="lower")
    ax.set_xlabel("layer")
    ax.set_ylabel("layer")
    ax.set_title("representation similarity")
    ax.set_xticks(range(matrix.shape[1]))
    ax.set_yticks(range(matrix.shape[0]))
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_curve(rows: list[CurveRow], path) -> None:
    steps = [r.step for r in rows]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(steps, [r.loss for r in rows], label="combined")
    if any(r.inter_loss for r in rows):
        ax.plot(steps, [r.inter_loss for r in rows], label="intermediate", alpha=0.7)
    if any(r.final_loss for r in rows):
        ax.plot(steps, [r.final_loss for r in rows], label="final", alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_schedule(schedule: list[CandidateScore], path) -> None:
    depths = [s.depth for s in schedule]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(depths, [s.ter for s in schedule], marker="o")
    for s in schedule:
        ax.annotate(
            ",".join(str(i) for i in s.subset),
            (s.depth, s.ter),
            fontsize=7,
            textcoords="offset points",
            xytext=(4, 4),
            rotation=30,
        )
    ax.set_xlabel("depth")
    ax.set_ylabel("token error rate")
    ax.invert_xaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_bench(rows: list[BenchRow], path) -> None:
    depths = [r.depth for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.5, 4.0))
    ax1.plot(depths, [r.median_ms for r in rows], marker="o")
    ax1.set_xlabel("depth")
    ax1.set_ylabel("median corpus time (ms)")
    ax2.plot(depths, [r.speedup for r in rows], marker="o")
    ax2.set_xlabel("depth")
    ax2.set_ylabel("speedup vs full depth")
    for ax in (ax1, ax2):
        ax.invert_xaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_depth_curves(curves: dict[str, list[tuple[int, float]]], path) -> None:
    """One TER-vs-depth line per named evaluation family."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name in sorted(curves):
        pts = sorted(curves[name])
        ax.plot([d for d, _ in pts], [t for _, t in pts], marker="o", label=name)
    ax.set_xlabel("depth")
    ax.set_ylabel("token error rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
