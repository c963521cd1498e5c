"""Report figures rendered to files with matplotlib's non-interactive backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .skeleton import JOINT_NAMES  # noqa: E402


def _save(fig, out_dir, stem, svg):
    paths = [Path(out_dir) / f"{stem}.png"]
    if svg:
        paths.append(Path(out_dir) / f"{stem}.svg")
    for p in paths:
        # fixed metadata keeps repeated renders byte-stable
        meta = {"Date": None} if p.suffix == ".svg" else {"Software": None}
        fig.savefig(p, dpi=100, metadata=meta)
    plt.close(fig)
    return paths


def success_figure(report):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(report.thresholds_mm, np.asarray(report.success) * 100.0, marker=".")
    ax.set_xlabel("max joint error threshold (mm)")
    ax.set_ylabel("frames within threshold (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return fig


def per_joint_figure(report):
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.bar(np.arange(len(JOINT_NAMES)), report.per_joint_mm)
    ax.set_xticks(np.arange(len(JOINT_NAMES)))
    ax.set_xticklabels(JOINT_NAMES, rotation=70, fontsize=7)
    ax.set_ylabel("mean error (mm)")
    fig.tight_layout()
    return fig


def viewpoint_figure(bins, axis):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    centers = 0.5 * (np.asarray(bins.edges_deg[:-1]) + np.asarray(bins.edges_deg[1:]))
    means = np.array([np.nan if m is None else m for m in bins.means])
    ax.plot(centers, means, marker="o")
    ax.set_xlabel(f"{axis} (deg)")
    ax.set_ylabel("mean joint error (mm)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return fig


def report_figures(report, out_dir, svg=False):
    paths = _save(success_figure(report), out_dir, "success", svg)
    paths += _save(per_joint_figure(report), out_dir, "per_joint", svg)
    for axis, bins in report.viewpoint.items():
        paths += _save(viewpoint_figure(bins, axis), out_dir, f"viewpoint_{axis}", svg)
    return paths
