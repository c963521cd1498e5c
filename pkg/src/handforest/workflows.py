"""Dataset-level training and inference used by the command line."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import Cloud, backproject
from .forest import ForestParams
from .normals import NormalForest, NormalForestParams, predict_normals, train_normal_forest
from .pipeline import (ModelBundle, PipelineConfig, PoseEstimate, TrainingFrame, estimate_pose,
                       train_bundle)
from .skeleton import JOINT_NAMES, N_JOINTS, HandPose
from .synth import ManifestRecord, analytic_normals, load_dataset

log = logging.getLogger(__name__)


@dataclass
class LoadedFrame:
    cloud: Cloud
    record: ManifestRecord


def load_clouds(data_dir):
    return [LoadedFrame(backproject(frame), rec) for frame, rec in load_dataset(data_dir)]


def normal_targets(item: LoadedFrame):
    """Analytic normals per cloud point, signed along the projection ray."""
    cam = item.cloud.intrinsics
    nrm = analytic_normals(item.record.params, cam)
    px = item.cloud.pixels
    return -nrm[px[:, 0], px[:, 1]]


def train_normals(items, params: NormalForestParams = NormalForestParams()) -> NormalForest:
    return train_normal_forest([(it.cloud, normal_targets(it)) for it in items], params)


def training_frames(items, normal_forest: NormalForest):
    """Clouds with forest normals, as the cascade sees them at inference."""
    return [TrainingFrame(predict_normals(normal_forest, it.cloud), it.record.pose)
            for it in items]


def train_pose(items, normal_forest, params: ForestParams = ForestParams(),
               config: PipelineConfig = PipelineConfig()) -> ModelBundle:
    t = time.perf_counter()
    frames = training_frames(items, normal_forest)
    log.info("training normals predicted in %.1f s", time.perf_counter() - t)
    return train_bundle(frames, normal_forest, params, config)


def estimate_all(items, bundle: ModelBundle, *, points_per_stage=None, seed=0):
    out = []
    for it in items:
        est: PoseEstimate = estimate_pose(it.cloud, bundle, points_per_stage=points_per_stage,
                                          seed=seed)
        out.append((it.record.frame_id, est))
    return out


def roll_of(record: ManifestRecord):
    return record.params.view()[2]


def max_abs_roll_deg(items):
    return float(np.degrees(np.max(np.abs([roll_of(it.record) for it in items]))))


def pose_header():
    return (["frame_id"] + [f"{j}_{a}" for j in JOINT_NAMES for a in "xyz"]
            + [f"{j}_fallback" for j in JOINT_NAMES])


def write_poses(path, results):
    """``results``: ``[(frame_id, PoseEstimate)]``.  A ``.timing.csv`` sidecar
    holds per-stage milliseconds."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(pose_header())
        for fid, est in results:
            w.writerow([fid] + [repr(float(v)) for v in est.pose.joints.ravel()]
                       + [int(f) for f in est.flags])
    stages = sorted({k for _, est in results for k in est.timings_ms})
    with open(timing_path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id"] + stages)
        for fid, est in results:
            w.writerow([fid] + [f"{est.timings_ms.get(s, float('nan')):.3f}" for s in stages])


def timing_path(path):
    path = Path(path)
    return path.with_name(path.name + ".timing.csv")


def read_poses(path):
    """``(frame_ids, poses, flags)`` from a pose file."""
    ids, poses, flags = [], [], []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        if next(rows, None) != pose_header():
            raise ValueError(f"{path}: unexpected pose file header")
        for row in rows:
            if len(row) != 1 + 4 * N_JOINTS:
                raise ValueError(f"{path}: malformed row for {row[:1]}")
            ids.append(row[0])
            poses.append(HandPose(np.array(row[1:1 + 3 * N_JOINTS], dtype=float)))
            flags.append(np.array(row[1 + 3 * N_JOINTS:], dtype=int).astype(bool))
    return ids, poses, flags


def read_timings(path):
    p = timing_path(path)
    if not p.exists():
        return []
    with open(p, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        return [{k: float(v) for k, v in zip(header[1:], row[1:])} for row in rows]
