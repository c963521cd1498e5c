"""Joint error metrics, evaluation reports and the normal-estimation benchmark."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import deep_interior_mask
from .normals import angular_error_deg, estimate_normals_pca, predict_normals
from .skeleton import JOINT_NAMES, HandPose

DEFAULT_THRESHOLDS = (10.0, 80.0, 2.5)


class LengthMismatch(ValueError):
    """Prediction and ground-truth sequences differ in length."""


def default_thresholds():
    return threshold_grid(*DEFAULT_THRESHOLDS)


def threshold_grid(lo, hi, step):
    if not step > 0 or hi < lo:
        raise ValueError("threshold grid needs step > 0 and hi >= lo")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


def parse_thresholds(text):
    """Parse ``LO:HI:STEP``."""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise ValueError("thresholds must look like LO:HI:STEP")
    return threshold_grid(*(float(p) for p in parts))


def _joints(poses):
    return np.array([p.joints if isinstance(p, HandPose) else np.asarray(p, dtype=float)
                     for p in poses]).reshape(-1, len(JOINT_NAMES), 3)


def joint_errors(pred, gt):
    """Euclidean error per frame and joint, ``(n_frames, 21)``."""
    pred, gt = list(pred), list(gt)
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predictions for {len(gt)} ground-truth frames")
    if not pred:
        return np.zeros((0, len(JOINT_NAMES)))
    return np.linalg.norm(_joints(pred) - _joints(gt), axis=2)


def mean_joint_error(pred, gt):
    """Mean error per named joint (mm), in joint order."""
    return joint_errors(pred, gt).mean(axis=0)


def success_rate(pred, gt, thresholds):
    """Fraction of frames whose worst joint error is below each threshold."""
    worst = joint_errors(pred, gt).max(axis=1)
    thresholds = np.asarray(thresholds, dtype=float)
    if len(worst) == 0:
        return np.zeros(len(thresholds))
    return (worst[None, :] < thresholds[:, None]).mean(axis=1)


@dataclass
class ViewBins:
    """Mean all-joint error per bin; empty bins hold ``None``."""

    edges_deg: list
    means: list
    counts: list

    def spread(self):
        vals = [m for m in self.means if m is not None]
        return max(vals) - min(vals) if vals else float("nan")


def _bin(values_deg, errors, bin_deg, lo, hi):
    edges = np.arange(lo, hi + bin_deg * 0.5, bin_deg)
    if edges[-1] < hi:
        edges = np.append(edges, edges[-1] + bin_deg)
    idx = np.clip(np.searchsorted(edges, values_deg, side="right") - 1, 0, len(edges) - 2)
    means, counts = [], []
    for b in range(len(edges) - 1):
        sel = idx == b
        counts.append(int(sel.sum()))
        means.append(float(errors[sel].mean()) if sel.any() else None)
    return ViewBins([float(e) for e in edges], means, counts)


def error_by_viewpoint(pred, gt, params, bin_deg=15.0, yaw_limit_deg=90.0, pitch_limit_deg=90.0):
    """Mean all-joint error binned by yaw and by pitch of the generating parameters."""
    err = joint_errors(pred, gt).mean(axis=1)
    params = list(params)
    if len(params) != len(err):
        raise LengthMismatch("one parameter set per frame is required")
    if not bin_deg > 0:
        raise ValueError("bin_deg must be positive")
    yaw = np.degrees([p.view()[0] for p in params])
    pitch = np.degrees([p.view()[1] for p in params])
    return {"yaw": _bin(yaw, err, bin_deg, -yaw_limit_deg, yaw_limit_deg),
            "pitch": _bin(pitch, err, bin_deg, -pitch_limit_deg, pitch_limit_deg)}


def timing_summary(timings):
    """``{stage: {mean, median, max}}`` from a list of per-frame ``{stage: ms}`` dicts."""
    out = {}
    for stage in sorted({k for t in timings for k in t}):
        v = np.array([t[stage] for t in timings if stage in t])
        out[stage] = {"mean": float(v.mean()), "median": float(np.median(v)),
                      "max": float(v.max())}
    return out


@dataclass
class EvalReport:
    per_joint_mm: list
    thresholds_mm: list
    success: list
    viewpoint: dict = field(default_factory=dict)
    timing_ms: dict = field(default_factory=dict)
    n_frames: int = 0

    @property
    def mean_error_mm(self):
        return float(np.mean(self.per_joint_mm))

    def to_dict(self):
        return {"joints": list(JOINT_NAMES), "per_joint_mm": list(self.per_joint_mm),
                "thresholds_mm": list(self.thresholds_mm), "success": list(self.success),
                "viewpoint": {k: {"edges_deg": v.edges_deg, "means": v.means, "counts": v.counts}
                              for k, v in self.viewpoint.items()},
                "timing_ms": self.timing_ms, "n_frames": self.n_frames}

    @classmethod
    def from_dict(cls, d):
        return cls(d["per_joint_mm"], d["thresholds_mm"], d["success"],
                   {k: ViewBins(v["edges_deg"], v["means"], v["counts"])
                    for k, v in d["viewpoint"].items()},
                   d["timing_ms"], d["n_frames"])

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def build_report(pred, gt, params=None, thresholds=None, timings=None, bin_deg=15.0):
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, float)
    pred, gt = list(pred), list(gt)
    view = error_by_viewpoint(pred, gt, params, bin_deg) if params is not None else {}
    return EvalReport([float(v) for v in mean_joint_error(pred, gt)],
                      [float(t) for t in thresholds],
                      [float(s) for s in success_rate(pred, gt, thresholds)],
                      view, timing_summary(timings or []), len(pred))


def write_report(report: EvalReport, out_dir, svg=False):
    """Write ``report.json``, CSV tables and figures; returns the written paths."""
    from . import plotting

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "report.json"]
    written[0].write_text(report.to_json())
    with open(out_dir / "per_joint.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["joint", "mean_error_mm"])
        w.writerows([n, repr(v)] for n, v in zip(JOINT_NAMES, report.per_joint_mm))
    with open(out_dir / "success.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold_mm", "fraction"])
        w.writerows([repr(t), repr(s)] for t, s in zip(report.thresholds_mm, report.success))
    with open(out_dir / "viewpoint.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "lo_deg", "hi_deg", "mean_error_mm", "count"])
        for axis, b in report.viewpoint.items():
            for i, (m, c) in enumerate(zip(b.means, b.counts)):
                w.writerow([axis, b.edges_deg[i], b.edges_deg[i + 1],
                            "" if m is None else repr(m), c])
    written += [out_dir / n for n in ("per_joint.csv", "success.csv", "viewpoint.csv")]
    written += plotting.report_figures(report, out_dir, svg=svg)
    return written


@dataclass
class NormalBenchRow:
    frame_id: str
    n_points: int
    pca_ms: float
    forest_ms: float
    pca_error_deg: float
    forest_error_deg: float
    pca_ms_sd: float = 0.0
    forest_ms_sd: float = 0.0


def bench_normals(items, forest, targets, repeats=1):
    """Time eigen normals against forest normals per frame and score both on
    deep-interior points against ``targets`` (one normal array per item).

    Times are the best of ``repeats`` runs; the ``_sd`` fields give the spread.
    """
    rows = []
    for (frame_id, cloud), gt in zip(items, targets):
        mask = deep_interior_mask(cloud)
        res = {}
        for name, fn in (("pca", estimate_normals_pca), ("forest",
                                                         lambda c: predict_normals(forest, c))):
            times = []
            for _ in range(max(1, repeats)):
                t = time.perf_counter()
                out = fn(cloud)
                times.append(1e3 * (time.perf_counter() - t))
            err = angular_error_deg(out.normals[mask], gt[mask])
            res[name] = (min(times), float(err.mean()) if len(err) else float("nan"),
                         float(np.std(times)))
        rows.append(NormalBenchRow(frame_id, len(cloud), res["pca"][0], res["forest"][0],
                                   res["pca"][1], res["forest"][1], res["pca"][2],
                                   res["forest"][2]))
    return rows


def write_bench_table(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "n_points", "pca_ms", "forest_ms", "pca_error_deg",
                    "forest_error_deg", "pca_ms_sd", "forest_ms_sd"])
        for r in rows:
            w.writerow([r.frame_id, r.n_points, f"{r.pca_ms:.3f}", f"{r.forest_ms:.3f}",
                        repr(r.pca_error_deg), repr(r.forest_error_deg), f"{r.pca_ms_sd:.3f}",
                        f"{r.forest_ms_sd:.3f}"])
        if rows:
            pca = np.mean([r.pca_ms for r in rows])
            fst = np.mean([r.forest_ms for r in rows])
            w.writerow(["#mean", int(np.mean([r.n_points for r in rows])), f"{pca:.3f}",
                        f"{fst:.3f}", repr(float(np.mean([r.pca_error_deg for r in rows]))),
                        repr(float(np.mean([r.forest_error_deg for r in rows]))), "", ""])
            w.writerow(["#speedup", "", f"{pca / fst:.3f}", "", "", "", "", ""])
