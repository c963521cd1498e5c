"""Hierarchical hand pose cascade.

Stages run in order: normals, wrist (silhouette points), the five MCP joints
(inner points), a rigid palm snap, then PIP, DIP and TIP per finger.  Every
stage conditions its features and offsets on a local frame built from the
input point and the joints found by earlier stages, so the whole cascade
follows rigid motions of the hand.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cloud import Cloud
from .features import (DEFAULT_OFFSET_RANGE_MM, WRIST_OFFSET_RANGE_MM, FeatureKind,
                       ImageSurfaces)
from .forest import (DEFAULT_BANDWIDTH_MM, EmptyTrainingSet, FcrfModel, ForestParams, Samples,
                     aggregate_joint, predict_offsets_batch, train_fcrf)
from .geometry import DegenerateFrame, LocalFrame, kabsch_align, rot_z
from .modelio import load_model, save_model
from .normals import NormalForest, predict_normals
from .skeleton import DIP, FINGERS, MCP, N_JOINTS, PALM, PIP, TIP, WRIST, HandPose

log = logging.getLogger(__name__)

PARALLEL_TOL = 1e-6
Y_AXIS = 1
LEVELS = ("pip", "dip", "tip")
FINGER_STAGES = tuple(f"{lv}_{f}" for f in FINGERS for lv in LEVELS)
STAGES = ("wrist", "mcp") + FINGER_STAGES
BUNDLE_FILE = "bundle.json"
NORMAL_MODEL_FILE = "normals.hcrf"


class NoEdgePoints(ValueError):
    """The cloud has no silhouette point with a usable edge normal."""


class NoValidPoints(ValueError):
    """No input point qualifies for a stage."""


def _unit_rows(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def plane_normal(points):
    """Unit normal of the least-squares plane through ``points``."""
    c = np.asarray(points, dtype=float)
    c = c - c.mean(axis=0)
    return np.linalg.svd(c)[2][-1]


def _palm_axes(y, z, z_sign_ref):
    """Right-handed pose with ``y`` exact and ``z`` orthogonalised against it."""
    y = y / np.linalg.norm(y)
    if np.dot(z, z_sign_ref) < 0:
        z = -z
    x = np.cross(y, z)
    n = np.linalg.norm(x)
    if n < PARALLEL_TOL:
        raise DegenerateFrame("palm normal is parallel to the wrist-middle axis")
    x /= n
    return np.column_stack([x, y, np.cross(x, y)])


def chirality_normal(wrist, mcps):
    """Back-of-hand direction implied by the joint layout (thumb side is +x)."""
    return np.cross(mcps[1] - wrist, mcps[4] - wrist)


def palm_pose_from_joints(wrist, mcps, z_ref=None):
    pts = np.vstack([wrist, mcps])
    z_ref = chirality_normal(wrist, mcps) if z_ref is None else z_ref
    return _palm_axes(mcps[2] - wrist, plane_normal(pts), z_ref)


@dataclass
class PalmTemplate:
    """Canonical wrist and MCP layout in the palm frame, with per-finger
    in-plane rest angles and bone lengths."""

    points: np.ndarray  # (6, 3): wrist then MCPs thumb..pinky
    alphas: np.ndarray = field(default_factory=lambda: np.zeros(5))
    bone_lengths: np.ndarray = field(default_factory=lambda: np.full((5, 3), 30.0))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(6, 3)
        self.alphas = np.asarray(self.alphas, dtype=float).reshape(5)
        self.bone_lengths = np.asarray(self.bone_lengths, dtype=float).reshape(5, 3)

    @classmethod
    def from_poses(cls, poses):
        poses = list(poses)
        if not poses:
            raise EmptyTrainingSet("template needs at least one pose")
        local = []
        for p in poses:
            P = palm_pose_from_joints(p.wrist, p.mcps)
            local.append((p.joints[PALM] - p.wrist) @ P)
        mean = np.mean(local, axis=0)
        # re-express so the rule used by fit_palm yields the identity here
        P0 = palm_pose_from_joints(mean[0], mean[1:])
        tmpl = cls((mean - mean[0]) @ P0)
        ang = np.empty((len(poses), 5))
        lengths = np.empty((len(poses), 5, 3))
        for i, p in enumerate(poses):
            R, _, _ = fit_palm(p.wrist, p.mcps, tmpl)
            d = (p.joints[PIP] - p.joints[MCP]) @ R
            ang[i] = np.arctan2(-d[:, 0], d[:, 1])
            J = p.joints
            lengths[i] = np.column_stack([np.linalg.norm(J[PIP] - J[MCP], axis=1),
                                          np.linalg.norm(J[DIP] - J[PIP], axis=1),
                                          np.linalg.norm(J[TIP] - J[DIP], axis=1)])
        tmpl.alphas = np.arctan2(np.sin(ang).mean(axis=0), np.cos(ang).mean(axis=0))
        tmpl.bone_lengths = lengths.mean(axis=0)
        return tmpl

    def to_dict(self):
        return {"points": self.points.tolist(), "alphas": self.alphas.tolist(),
                "bone_lengths": self.bone_lengths.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["points"], d["alphas"], d["bone_lengths"])


def fit_palm(wrist, mcps, template: PalmTemplate):
    """Rigidly snap the template palm onto estimated wrist and MCPs.

    Returns ``(palm_pose, snapped_mcps, snapped_wrist)``.
    """
    est = np.vstack([np.asarray(wrist, dtype=float), np.asarray(mcps, dtype=float)])
    T = kabsch_align(template.points, est)
    snapped = T.apply(template.points)
    pose = _palm_axes(snapped[3] - snapped[0], plane_normal(snapped), T.rotation[:, 2])
    return pose, snapped[1:], snapped[0]


# frame constructions ----------------------------------------------------------

def wrist_frames(normals):
    """Silhouette frames: ``z`` is the in-image edge normal, ``x`` the viewing axis."""
    z = _unit_rows(np.asarray(normals, dtype=float).reshape(-1, 3))
    x = np.broadcast_to([0.0, 0.0, 1.0], z.shape)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=-1)


def edge_normal_ok(normals):
    """Edge normals from a successful silhouette fit lie in the image plane."""
    n = np.asarray(normals, dtype=float).reshape(-1, 3)
    return (np.abs(n[:, 2]) <= 1e-9) & (np.linalg.norm(n[:, :2], axis=1) > 0.5)


def wrist_frame(cloud: Cloud, index: int) -> LocalFrame:
    if cloud.normals is None or not cloud.is_edge[index]:
        raise DegenerateFrame("wrist frames need an edge point with a normal")
    n = cloud.normals[index]
    if not edge_normal_ok(n)[0]:
        raise DegenerateFrame("edge normal is not an image-plane normal")
    return LocalFrame(wrist_frames(n)[0], cloud.points[index].copy())


def mcp_frames(points, normals, wrist):
    """``(poses, valid)``: ``z = n``, ``y ∝ n × (wrist - p)``, ``x = y × z``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    z = _unit_rows(np.asarray(normals, dtype=float).reshape(-1, 3))
    to_w = np.asarray(wrist, dtype=float) - points
    dist = np.linalg.norm(to_w, axis=1)
    y = np.cross(z, to_w)
    ny = np.linalg.norm(y, axis=1)
    valid = ny > PARALLEL_TOL * np.maximum(dist, 1e-300)
    y = y / np.where(valid, ny, 1.0)[:, None]
    x = np.cross(y, z)
    return np.stack([x, y, z], axis=-1), valid


def mcp_frame(cloud: Cloud, index: int, wrist) -> LocalFrame:
    if cloud.normals is None:
        raise DegenerateFrame("mcp frames need normals")
    poses, valid = mcp_frames(cloud.points[index], cloud.normals[index], wrist)
    if not valid[0]:
        raise DegenerateFrame("wrist direction is parallel to the normal")
    return LocalFrame(poses[0], cloud.points[index].copy())


def pip_pose(palm_pose, alpha):
    return np.asarray(palm_pose, dtype=float) @ rot_z(alpha)


def pip_frame(p, palm_pose, finger, template: PalmTemplate) -> LocalFrame:
    return LocalFrame(pip_pose(palm_pose, template.alphas[finger]), np.asarray(p, dtype=float))


def finger_pose(parent, grandparent, palm_pose):
    """Along-finger pose: ``y`` from grandparent to parent, ``x ∝ z_palm × y``.

    When ``y`` is parallel to the palm normal the palm ``y`` axis breaks the tie.
    """
    y = np.asarray(parent, dtype=float) - np.asarray(grandparent, dtype=float)
    n = np.linalg.norm(y)
    if n == 0.0:
        raise DegenerateFrame("parent and grandparent coincide")
    y /= n
    x = np.cross(palm_pose[:, 2], y)
    if np.linalg.norm(x) < PARALLEL_TOL:
        x = np.cross(palm_pose[:, 1], y)
    x /= np.linalg.norm(x)
    return np.column_stack([x, y, np.cross(x, y)])


def finger_frame(p, parent, grandparent, palm_pose) -> LocalFrame:
    return LocalFrame(finger_pose(parent, grandparent, palm_pose), np.asarray(p, dtype=float))


# configuration and bundle -----------------------------------------------------

@dataclass
class PipelineConfig:
    kind: str = "normal"
    wrist_kind: str = "normal"
    points_per_stage: int = 256
    pip_radius_mm: float = 30.0
    finger_radius_mm: float = 25.0
    dip_tip_axis_constraint: bool = False
    bandwidth_mm: float = DEFAULT_BANDWIDTH_MM
    offset_range_mm: float = DEFAULT_OFFSET_RANGE_MM
    wrist_offset_range_mm: float = WRIST_OFFSET_RANGE_MM
    # training points drawn per frame and stage
    wrist_samples: int = 40
    mcp_samples: int = 40
    finger_samples: int = 20

    def stage_kind(self, stage):
        return FeatureKind.parse(self.wrist_kind if stage == "wrist" else self.kind)

    def axis_constraint(self, stage):
        if stage.startswith("pip_") or (self.dip_tip_axis_constraint and stage in FINGER_STAGES):
            return Y_AXIS
        return None


@dataclass
class ModelBundle:
    normal_forest: NormalForest
    stages: dict
    template: PalmTemplate
    config: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        missing = [s for s in STAGES if s not in self.stages]
        if missing:
            raise ValueError(f"bundle lacks stage models: {missing}")

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_model(self.normal_forest, out_dir / NORMAL_MODEL_FILE)
        meta = {"version": 1, "template": self.template.to_dict(), "config": asdict(self.config),
                "stages": {}}
        for name in STAGES:
            m = self.stages[name]
            save_model(m, out_dir / f"{name}.hcrf")
            meta["stages"][name] = {"file": f"{name}.hcrf", "axis_constraint": m.axis_constraint}
        (out_dir / BUNDLE_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, bundle_dir):
        bundle_dir = Path(bundle_dir)
        meta = json.loads((bundle_dir / BUNDLE_FILE).read_text())
        stages = {}
        for name, info in meta["stages"].items():
            m = load_model(bundle_dir / info["file"])
            if not isinstance(m, FcrfModel):
                raise ValueError(f"{info['file']} is not a pose stage model")
            m.axis_constraint = info["axis_constraint"]
            stages[name] = m
        nf = load_model(bundle_dir / NORMAL_MODEL_FILE)
        if not isinstance(nf, NormalForest):
            raise ValueError("normal model file holds a pose stage")
        return cls(nf, stages, PalmTemplate.from_dict(meta["template"]),
                   PipelineConfig(**meta["config"]))


# inference -------------------------------------------------------------------

@dataclass
class PoseEstimate:
    pose: HandPose
    flags: np.ndarray  # (21,) True where a joint came from the bone-extension fallback
    timings_ms: dict = field(default_factory=dict)


def _subsample(rng, ids, n):
    """Systematic sample of ``n`` ids: evenly strided with a random start.

    Every id is equally likely to be drawn, and the stride spreads the sample
    over the raster so the vote density varies less between draws.
    """
    if n is None or len(ids) <= n:
        return ids
    pos = np.floor((np.arange(n) + rng.uniform()) * (len(ids) / n)).astype(np.int64)
    return ids[np.minimum(pos, len(ids) - 1)]


def _vote(model, source, pts, rots, bandwidth):
    fids = np.zeros(len(pts), dtype=np.int64)
    votes = pts[:, None, :] + predict_offsets_batch(model, source, fids, pts, rots)
    return np.array([aggregate_joint(votes[:, j], bandwidth) for j in range(model.n_joints)])


def estimate_wrist(cloud: Cloud, bundle: ModelBundle, *, source=None, rng=None,
                   points_per_stage=None):
    if cloud.normals is None:
        raise DegenerateFrame("estimate normals before the cascade")
    edge = cloud.edge_ids()
    edge = edge[edge_normal_ok(cloud.normals[edge])]
    if len(edge) == 0:
        raise NoEdgePoints("no silhouette point with an image-plane normal")
    rng = rng or np.random.default_rng(0)
    cfg = bundle.config
    ids = _subsample(rng, edge, points_per_stage or cfg.points_per_stage)
    source = source or ImageSurfaces([cloud], need_normals=True)
    pts = cloud.points[ids]
    return _vote(bundle.stages["wrist"], source, pts, wrist_frames(cloud.normals[ids]),
                 cfg.bandwidth_mm)[0]


def estimate_mcps(cloud: Cloud, wrist, bundle: ModelBundle, *, source=None, rng=None,
                  points_per_stage=None):
    inner = cloud.inner_ids()
    poses, valid = mcp_frames(cloud.points[inner], cloud.normals[inner], wrist)
    if not np.any(valid):
        raise NoValidPoints("no inner point admits an MCP frame")
    rng = rng or np.random.default_rng(0)
    cfg = bundle.config
    sel = _subsample(rng, np.flatnonzero(valid), points_per_stage or cfg.points_per_stage)
    source = source or ImageSurfaces([cloud], need_normals=True)
    return _vote(bundle.stages["mcp"], source, cloud.points[inner[sel]], poses[sel],
                 cfg.bandwidth_mm)


def _neighborhood(cloud, center, radius):
    d2 = np.sum((cloud.points - center) ** 2, axis=1)
    return np.flatnonzero(d2 <= radius * radius)


def estimate_finger_joint(cloud: Cloud, level, finger, parent, grandparent, palm_pose,
                          bundle: ModelBundle, *, source=None, rng=None, points_per_stage=None):
    """One PIP/DIP/TIP joint.  Returns ``(position, used_fallback)``.

    ``grandparent`` is ignored for PIP, whose frame comes from the palm.
    """
    cfg = bundle.config
    tmpl = bundle.template
    li = LEVELS.index(level)
    if level == "pip":
        pose = pip_pose(palm_pose, tmpl.alphas[finger])
        radius = cfg.pip_radius_mm
    else:
        pose = finger_pose(parent, grandparent, palm_pose)
        radius = cfg.finger_radius_mm
    ids = _neighborhood(cloud, parent, radius)
    if len(ids) == 0:
        return parent + tmpl.bone_lengths[finger, li] * pose[:, 1], True
    rng = rng or np.random.default_rng(0)
    ids = _subsample(rng, ids, points_per_stage or cfg.points_per_stage)
    source = source or ImageSurfaces([cloud], need_normals=True)
    rots = np.broadcast_to(pose, (len(ids), 3, 3)).copy()
    model = bundle.stages[f"{level}_{FINGERS[finger]}"]
    return _vote(model, source, cloud.points[ids], rots, cfg.bandwidth_mm)[0], False


def estimate_pose(cloud: Cloud, bundle: ModelBundle, *, points_per_stage=None, seed=0,
                  normals_given=False) -> PoseEstimate:
    """Run the full cascade on one cloud."""
    timings = {}
    t0 = time.perf_counter()
    if not normals_given or cloud.normals is None:
        cloud = predict_normals(bundle.normal_forest, cloud)
    t1 = time.perf_counter()
    timings["normals"] = 1e3 * (t1 - t0)
    rng = np.random.default_rng(seed)
    need = any(bundle.config.stage_kind(s) == FeatureKind.NORMAL_DIFF for s in STAGES)
    source = ImageSurfaces([cloud], need_normals=need)
    kw = dict(source=source, rng=rng, points_per_stage=points_per_stage)
    wrist = estimate_wrist(cloud, bundle, **kw)
    t2 = time.perf_counter()
    timings["wrist"] = 1e3 * (t2 - t1)
    mcps = estimate_mcps(cloud, wrist, bundle, **kw)
    palm_pose, mcps, wrist = fit_palm(wrist, mcps, bundle.template)
    t3 = time.perf_counter()
    timings["palm"] = 1e3 * (t3 - t2)
    joints = np.zeros((N_JOINTS, 3))
    flags = np.zeros(N_JOINTS, dtype=bool)
    joints[WRIST] = wrist
    joints[MCP] = mcps
    for k in range(5):
        chain = [MCP[k], PIP[k], DIP[k], TIP[k]]
        for li, level in enumerate(LEVELS):
            parent = joints[chain[li]]
            grand = joints[chain[li - 1]] if li > 0 else None
            joints[chain[li + 1]], flags[chain[li + 1]] = estimate_finger_joint(
                cloud, level, k, parent, grand, palm_pose, bundle, **kw)
    timings["fingers"] = 1e3 * (time.perf_counter() - t3)
    timings["total"] = 1e3 * (time.perf_counter() - t0)
    return PoseEstimate(HandPose(joints), flags, timings)


# training --------------------------------------------------------------------

@dataclass
class TrainingFrame:
    """A cloud carrying normals (as produced at inference) and its true pose."""

    cloud: Cloud
    pose: HandPose


def _stage_seed(seed, stage):
    return int(np.random.SeedSequence([seed, STAGES.index(stage)]).generate_state(1)[0])


def collect_stage_samples(frames, template: PalmTemplate, config: PipelineConfig, seed=0):
    """Per-stage training samples with parents taken from ground truth."""
    parts = {s: [] for s in STAGES}
    for fi, (frame, ss) in enumerate(zip(frames, np.random.SeedSequence(seed).spawn(len(frames)))):
        rng = np.random.default_rng(ss)
        c, J = frame.cloud, frame.pose.joints
        if c.normals is None:
            raise ValueError("training clouds need normals")

        def add(stage, ids, rots, joints):
            if len(ids):
                off = J[joints][None, :, :] - c.points[ids][:, None, :]
                parts[stage].append(Samples(np.full(len(ids), fi, dtype=np.int64), ids,
                                            np.ascontiguousarray(rots), off))

        edge = c.edge_ids()
        edge = _subsample(rng, edge[edge_normal_ok(c.normals[edge])], config.wrist_samples)
        add("wrist", edge, wrist_frames(c.normals[edge]), [WRIST])
        inner = c.inner_ids()
        poses, valid = mcp_frames(c.points[inner], c.normals[inner], J[WRIST])
        sel = _subsample(rng, np.flatnonzero(valid), config.mcp_samples)
        add("mcp", inner[sel], poses[sel], list(MCP))
        palm_pose, _, _ = fit_palm(J[WRIST], J[MCP], template)
        for k, f in enumerate(FINGERS):
            chain = [MCP[k], PIP[k], DIP[k], TIP[k]]
            for li, level in enumerate(LEVELS):
                parent = J[chain[li]]
                if level == "pip":
                    pose = pip_pose(palm_pose, template.alphas[k])
                    r = config.pip_radius_mm
                else:
                    try:
                        pose = finger_pose(parent, J[chain[li - 1]], palm_pose)
                    except DegenerateFrame:
                        continue
                    r = config.finger_radius_mm
                ids = _subsample(rng, _neighborhood(c, parent, r), config.finger_samples)
                add(f"{level}_{f}", ids, np.broadcast_to(pose, (len(ids), 3, 3)),
                    [chain[li + 1]])
    return {s: Samples.concat(p) for s, p in parts.items()}


def train_bundle(frames, normal_forest: NormalForest, params: ForestParams = ForestParams(),
                 config: PipelineConfig = PipelineConfig(), *, stage_params=None):
    """Train all stage forests.  ``stage_params`` may override ``params`` per stage."""
    frames = list(frames)
    if not frames:
        raise EmptyTrainingSet("no training frames")
    template = PalmTemplate.from_poses([f.pose for f in frames])
    samples = collect_stage_samples(frames, template, config, params.seed)
    clouds = [f.cloud for f in frames]
    stages = {}
    for name in STAGES:
        p = (stage_params or {}).get(name, params)
        rng_mm = config.wrist_offset_range_mm if name == "wrist" else config.offset_range_mm
        p = ForestParams(**{**asdict(p), "offset_range_mm": rng_mm,
                            "bandwidth_mm": config.bandwidth_mm,
                            "seed": _stage_seed(params.seed, name)})
        t = time.perf_counter()
        stages[name] = train_fcrf(samples[name], clouds, p, kind=config.stage_kind(name),
                                  stage=name, axis_constraint=config.axis_constraint(name))
        log.info("stage %s: %d samples, %.1f s", name, len(samples[name]),
                 time.perf_counter() - t)
    return ModelBundle(normal_forest, stages, template, config)


# baselines -------------------------------------------------------------------

def train_flat(frames, params: ForestParams = ForestParams(), kind="normal",
               samples_per_frame=60):
    """Single forest regressing all joints from camera-frame features."""
    frames = list(frames)
    parts = []
    for fi, (frame, ss) in enumerate(zip(frames, np.random.SeedSequence(params.seed).spawn(
            len(frames)))):
        rng = np.random.default_rng(ss)
        c = frame.cloud
        ids = _subsample(rng, np.arange(len(c.points)), samples_per_frame)
        off = frame.pose.joints[None] - c.points[ids][:, None, :]
        parts.append(Samples(np.full(len(ids), fi, dtype=np.int64), ids,
                             np.tile(np.eye(3), (len(ids), 1, 1)), off))
    return train_fcrf(Samples.concat(parts), [f.cloud for f in frames], params,
                      kind=FeatureKind.parse(kind), stage="flat")


def estimate_flat(cloud: Cloud, model: FcrfModel, *, points_per_stage=256, seed=0,
                  bandwidth_mm=DEFAULT_BANDWIDTH_MM) -> HandPose:
    rng = np.random.default_rng(seed)
    ids = _subsample(rng, np.arange(len(cloud.points)), points_per_stage)
    source = ImageSurfaces([cloud], need_normals=model.kind == FeatureKind.NORMAL_DIFF)
    rots = np.tile(np.eye(3), (len(ids), 1, 1))
    return HandPose(_vote(model, source, cloud.points[ids], rots, bandwidth_mm))


def mean_pose(poses) -> HandPose:
    """Constant predictor: the average training pose in camera coordinates."""
    return HandPose(np.mean([p.joints for p in poses], axis=0))
