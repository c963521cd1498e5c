"""Synthetic articulated capsule hand: forward kinematics, depth rendering
with analytic normals, and seeded dataset generation.

Hand coordinates: wrist at the origin, +y toward the fingers, +z out of the
back of the hand, +x toward the thumb.  The view angles rotate the hand about
its palm centre; yaw turns about the camera y axis, pitch about the camera x
axis and roll about the viewing axis.  At zero view angles the palm faces the
camera with the fingers pointing up in the image.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .cloud import CameraIntrinsics, DepthFrame, read_depth_frame, write_depth_frame
from .geometry import RigidTransform, axis_angle, rot_x, rot_y, rot_z
from .skeleton import FINGERS, JOINT_NAMES, N_JOINTS, HandPose

log = logging.getLogger(__name__)


class OutOfFrustum(ValueError):
    """Part of the hand falls outside the camera image or behind the camera."""


# base position (mm), rest direction (deg from +y toward the thumb), bone lengths, radii
_FINGER_GEOMETRY = {
    "thumb": ((27.0, 28.0, -8.0), 48.0, (40.0, 32.0, 27.0), (11.0, 9.5, 8.5)),
    "index": ((22.0, 84.0, 0.0), 8.0, (42.0, 25.0, 21.0), (9.0, 8.2, 7.5)),
    "middle": ((0.0, 88.0, 0.0), 0.0, (46.0, 28.0, 22.0), (9.2, 8.4, 7.6)),
    "ring": ((-19.0, 83.0, 0.0), -8.0, (43.0, 27.0, 21.0), (8.8, 8.0, 7.3)),
    "pinky": ((-35.0, 73.0, 0.0), -17.0, (33.0, 21.0, 19.0), (8.0, 7.2, 6.6)),
}
_THUMB_PRONATION_DEG = -65.0

# palm: a sphere-swept planar quad (corners in hand coordinates, radius)
_PALM_QUAD = ((-25.0, 4.0, 0.0), (21.0, 4.0, 0.0), (23.0, 82.0, 0.0), (-35.0, 72.0, 0.0))
_PALM_RADIUS = 12.0

# extra (a, b, radius) capsules in hand coordinates; names resolve to finger bases
_PALM_CAPSULES = (
    ("index", "middle", 10.5),
    ("middle", "ring", 10.5),
    ("ring", "pinky", 10.0),
    ((14.0, 14.0, -2.0), "thumb", 13.0),
)

PALM_CENTER = np.array([0.0, 50.0, 0.0])
# palm facing the camera, fingers up in the image (camera y points down)
_CANONICAL = np.diag([-1.0, -1.0, 1.0])

ANGLE_NAMES = ("abd", "mcp", "pip", "dip")
PARAM_NAMES = ("yaw", "pitch", "roll", "tx", "ty", "tz") + tuple(
    f"{f}_{a}" for f in FINGERS for a in ANGLE_NAMES)
N_PARAMS = len(PARAM_NAMES)

DEFAULT_LIMITS_DEG = {"abd": (-25.0, 25.0), "mcp": (-20.0, 90.0),
                      "pip": (0.0, 110.0), "dip": (0.0, 90.0)}


def view_rotation(yaw, pitch, roll):
    return rot_z(roll) @ rot_x(pitch) @ rot_y(yaw) @ _CANONICAL


@dataclass
class SkeletonParams:
    """Global hand pose plus per-finger ``(abduction, MCP, PIP, DIP)`` angles."""

    global_pose: RigidTransform
    finger_angles: np.ndarray = field(default_factory=lambda: np.zeros((5, 4)))
    scale: float = 1.0

    def __post_init__(self):
        self.finger_angles = np.asarray(self.finger_angles, dtype=float).reshape(5, 4)

    @classmethod
    def from_view(cls, yaw, pitch, roll, center, finger_angles=None):
        """Pose with the palm centre at camera point ``center``."""
        R = view_rotation(yaw, pitch, roll)
        t = np.asarray(center, dtype=float) - R @ PALM_CENTER
        angles = np.zeros((5, 4)) if finger_angles is None else finger_angles
        return cls(RigidTransform(R, t), angles)

    def view(self):
        """``(yaw, pitch, roll, center)`` recovered from the global pose."""
        M = self.global_pose.rotation @ _CANONICAL.T
        pitch = float(np.arcsin(np.clip(M[2, 1], -1.0, 1.0)))
        yaw = float(np.arctan2(-M[2, 0], M[2, 2]))
        roll = float(np.arctan2(-M[0, 1], M[1, 1]))
        return yaw, pitch, roll, self.global_pose.apply(PALM_CENTER)

    def to_vector(self):
        yaw, pitch, roll, c = self.view()
        return np.concatenate([[yaw, pitch, roll], c, self.finger_angles.ravel()])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters")
        return cls.from_view(v[0], v[1], v[2], v[3:6], v[6:].reshape(5, 4))

    def in_limits(self, limits_deg=DEFAULT_LIMITS_DEG):
        lo = np.radians([limits_deg[a][0] for a in ANGLE_NAMES])
        hi = np.radians([limits_deg[a][1] for a in ANGLE_NAMES])
        return bool(np.all((self.finger_angles >= lo - 1e-12) & (self.finger_angles <= hi + 1e-12)))


def _finger_rest(name):
    base, ang, _, _ = _FINGER_GEOMETRY[name]
    R = rot_z(-np.radians(ang))
    if name == "thumb":
        R = R @ rot_y(np.radians(_THUMB_PRONATION_DEG))
    return np.array(base), R


def _hand_chain(finger_angles, scale=1.0):
    """Joint positions and bone capsules in hand coordinates."""
    joints = np.zeros((N_JOINTS, 3))
    caps = []
    for k, name in enumerate(FINGERS):
        base, R = _finger_rest(name)
        lengths = np.array(_FINGER_GEOMETRY[name][2]) * scale
        radii = np.array(_FINGER_GEOMETRY[name][3]) * scale
        abd, mcp, pip, dip = finger_angles[k]
        # flexion turns the finger toward the palm (-z), about the local x axis
        R = R @ rot_z(-abd) @ rot_x(-mcp)
        p = base * scale
        joints[1 + 4 * k] = p
        for b, flex in enumerate((pip, dip, None)):
            q = p + R @ np.array([0.0, lengths[b], 0.0])
            caps.append((p, q, radii[b]))
            joints[2 + 4 * k + b] = q
            p = q
            if flex is not None:
                R = R @ rot_x(-flex)
    bases = {name: np.array(_FINGER_GEOMETRY[name][0]) * scale for name in FINGERS}
    quad = np.array(_PALM_QUAD) * scale
    for k in range(4):
        caps.append((quad[k], quad[(k + 1) % 4], _PALM_RADIUS * scale))
    for a, b, r in _PALM_CAPSULES:
        pa = bases[a] if isinstance(a, str) else np.array(a) * scale
        pb = bases[b] if isinstance(b, str) else np.array(b) * scale
        caps.append((pa, pb, r * scale))
    return joints, caps


def canonical_joints(scale=1.0):
    """Zero-angle joint positions in hand coordinates."""
    return _hand_chain(np.zeros((5, 4)), scale)[0]


def forward_kinematics(params: SkeletonParams) -> HandPose:
    joints, _ = _hand_chain(params.finger_angles, params.scale)
    return HandPose(params.global_pose.apply(joints))


def slabs(params: SkeletonParams):
    """Camera-frame palm slab: ``(quads (1, 4, 3), radii (1,))``."""
    quad = params.global_pose.apply(np.array(_PALM_QUAD) * params.scale)
    return quad[None], np.array([_PALM_RADIUS * params.scale])


def capsules(params: SkeletonParams) -> np.ndarray:
    """``(n, 7)`` array of camera-frame capsules ``(a, b, radius)``."""
    _, caps = _hand_chain(params.finger_angles, params.scale)
    T = params.global_pose
    return np.array([np.concatenate([T.apply(a), T.apply(b), [r]]) for a, b, r in caps])


def check_frustum(caps, camera: CameraIntrinsics, margin_px=1.0):
    lo = np.minimum(caps[:, :3], caps[:, 3:6]) - caps[:, 6:7]
    hi = np.maximum(caps[:, :3], caps[:, 3:6]) + caps[:, 6:7]
    if np.any(lo[:, 2] <= 1.0):
        raise OutOfFrustum("hand reaches behind the camera")
    for X in (lo[:, 0], hi[:, 0]):
        for Z in (lo[:, 2], hi[:, 2]):
            u = camera.fx * X / Z + camera.cx
            if np.any(u < margin_px) or np.any(u > camera.width - 1 - margin_px):
                raise OutOfFrustum("hand leaves the image horizontally")
    for Y in (lo[:, 1], hi[:, 1]):
        for Z in (lo[:, 2], hi[:, 2]):
            v = camera.fy * Y / Z + camera.cy
            if np.any(v < margin_px) or np.any(v > camera.height - 1 - margin_px):
                raise OutOfFrustum("hand leaves the image vertically")


def render_primitives(caps, camera: CameraIntrinsics, quads=None, radii=None):
    """Depth and outward normal maps of capsules plus optional slab faces."""
    depth, nrm = _kernels.render_capsules(np.ascontiguousarray(caps, dtype=float), camera.fx,
                                          camera.fy, camera.cx, camera.cy, camera.height,
                                          camera.width)
    if quads is not None and len(quads):
        _kernels.render_slab_faces(np.ascontiguousarray(quads, dtype=float),
                                   np.ascontiguousarray(radii, dtype=float), camera.fx, camera.fy,
                                   camera.cx, camera.cy, depth, nrm)
    return depth, nrm


def render_maps(params: SkeletonParams, camera: CameraIntrinsics):
    return render_primitives(capsules(params), camera, *slabs(params))


def render_depth(params: SkeletonParams, camera: CameraIntrinsics | None = None, *,
                 noise_mm=0.0, rng=None):
    """Render ``(DepthFrame, HandPose, normal map)``.

    The normal map holds outward surface normals (facing the camera,
    ``n · ray < 0``); the normal estimators use the opposite sign.
    """
    camera = camera or CameraIntrinsics.default()
    check_frustum(capsules(params), camera)
    depth, nrm = render_maps(params, camera)
    if noise_mm > 0:
        rng = rng or np.random.default_rng(0)
        valid = depth > 0
        depth[valid] = np.maximum(depth[valid] + rng.normal(0.0, noise_mm, valid.sum()), 1.0)
    return DepthFrame(camera, depth), forward_kinematics(params), nrm


def _quad_normal(quad):
    n = np.cross(quad[2] - quad[0], quad[3] - quad[1])
    return n / np.linalg.norm(n)


def _in_quad(x, quad, n):
    """Points (already in the quad's plane) inside the convex quad."""
    s = np.stack([np.cross(quad[(k + 1) % 4] - quad[k], x - quad[k]) @ n for k in range(4)])
    return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)


def sample_surface(params: SkeletonParams, spacing_mm=1.5):
    """Points and outward normals on the union surface of the hand capsules,
    in camera coordinates (no visibility culling)."""
    caps = capsules(params)
    pts, nrm = [], []
    for a, b, r in zip(caps[:, :3], caps[:, 3:6], caps[:, 6]):
        axis = b - a
        L = np.linalg.norm(axis)
        w = axis / L if L > 0 else np.array([0.0, 0.0, 1.0])
        u = np.cross(w, [1.0, 0.0, 0.0])
        if np.linalg.norm(u) < 1e-6:
            u = np.cross(w, [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(w, u)
        n_ang = max(8, int(np.ceil(2 * np.pi * r / spacing_mm)))
        ang = np.linspace(0, 2 * np.pi, n_ang, endpoint=False)
        ring = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v
        for s in np.linspace(0, L, max(2, int(np.ceil(L / spacing_mm)) + 1)):
            pts.append(a + s * w + r * ring)
            nrm.append(ring)
        n_lat = max(4, int(np.ceil(np.pi * r / 2 / spacing_mm)))
        for end, sgn in ((a, -1.0), (b, 1.0)):
            for lat in np.linspace(0, np.pi / 2, n_lat + 1)[1:]:
                m = max(4, int(np.ceil(2 * np.pi * r * np.cos(lat) / spacing_mm)))
                ph = np.linspace(0, 2 * np.pi, m, endpoint=False)
                d = (np.cos(lat) * (np.cos(ph)[:, None] * u + np.sin(ph)[:, None] * v)
                     + sgn * np.sin(lat) * w)
                pts.append(end + r * d)
                nrm.append(d)
    quads, radii = slabs(params)
    for quad, r in zip(quads, radii):
        n = _quad_normal(quad)
        lo, hi = quad.min(axis=0), quad.max(axis=0)
        u = quad[1] - quad[0]
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        span = np.linalg.norm(hi - lo)
        g = np.arange(-span, span + spacing_mm, spacing_mm)
        uu, vv = np.meshgrid(g, g)
        flat = quad[0] + uu.reshape(-1, 1) * u + vv.reshape(-1, 1) * v
        flat = flat[_in_quad(flat, quad, n)]
        for side in (-1.0, 1.0):
            pts.append(flat + side * r * n)
            nrm.append(np.tile(side * n, (len(flat), 1)))
    pts = np.concatenate(pts)
    nrm = np.concatenate(nrm)
    keep = np.ones(len(pts), dtype=bool)
    for quad, r in zip(quads, radii):
        n = _quad_normal(quad)
        d = (pts - quad[0]) @ n
        keep &= ~(_in_quad(pts - d[:, None] * n, quad, n) & (np.abs(d) < r - 1e-6))
    for a, b, r in zip(caps[:, :3], caps[:, 3:6], caps[:, 6]):
        ab = b - a
        t = np.clip(((pts - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        d = np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)
        keep &= d >= r - 1e-6
    return pts[keep], nrm[keep]


@dataclass
class SamplerConfig:
    yaw_range_deg: float = 60.0
    pitch_range_deg: float = 45.0
    roll_range_deg: float = 180.0
    depth_range_mm: tuple = (400.0, 700.0)
    lateral_spread: float = 0.08
    limits_deg: dict = field(default_factory=lambda: dict(DEFAULT_LIMITS_DEG))
    noise_mm: float = 0.0
    max_tries: int = 200


def sample_params(rng, camera: CameraIntrinsics, config: SamplerConfig = SamplerConfig()):
    """Draw in-frustum parameters (rejection sampling on the frustum)."""
    lim = config.limits_deg
    for _ in range(config.max_tries):
        yaw = np.radians(rng.uniform(-config.yaw_range_deg, config.yaw_range_deg))
        pitch = np.radians(rng.uniform(-config.pitch_range_deg, config.pitch_range_deg))
        roll = np.radians(rng.uniform(-config.roll_range_deg, config.roll_range_deg))
        z = rng.uniform(*config.depth_range_mm)
        xy = rng.uniform(-config.lateral_spread, config.lateral_spread, size=2) * z
        angles = np.column_stack([
            np.radians(rng.uniform(lim[a][0], lim[a][1], size=5)) for a in ANGLE_NAMES])
        params = SkeletonParams.from_view(yaw, pitch, roll, [xy[0], xy[1], z], angles)
        try:
            check_frustum(capsules(params), camera)
        except OutOfFrustum:
            continue
        return params
    raise OutOfFrustum("could not sample an in-frustum pose; widen the depth range")


MANIFEST_NAME = "manifest.csv"


def manifest_header():
    cols = ["path"]
    cols += [f"{j}_{a}" for j in JOINT_NAMES for a in "xyz"]
    cols += list(PARAM_NAMES)
    return cols


@dataclass
class ManifestRecord:
    path: Path
    pose: HandPose
    params: SkeletonParams

    @property
    def frame_id(self):
        return self.path.stem


def generate_dataset(n, seed, out_dir, camera=None, config: SamplerConfig = SamplerConfig()):
    """Render ``n`` frames into ``out_dir/frames`` and write ``out_dir/manifest.csv``.

    Each frame has its own generator spawned from ``seed`` so the output does
    not depend on generation order.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    camera = camera or CameraIntrinsics.default()
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    records = []
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(ss)
        params = sample_params(rng, camera, config)
        frame, pose, _ = render_depth(params, camera, noise_mm=config.noise_mm, rng=rng)
        rel = Path("frames") / f"frame_{i:06d}.hcdf"
        write_depth_frame(out_dir / rel, frame)
        records.append(ManifestRecord(rel, pose, params))
    write_manifest(out_dir / MANIFEST_NAME, records)
    return records


def _fmt(x):
    return repr(float(x))


def write_manifest(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(manifest_header())
        for r in records:
            w.writerow([r.path.as_posix()] + [_fmt(v) for v in r.pose.joints.ravel()]
                       + [_fmt(v) for v in r.params.to_vector()])


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    records = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header != manifest_header():
            raise ValueError(f"{path}: unexpected manifest header")
        for row in rows:
            vals = np.array(row[1:], dtype=float)
            records.append(ManifestRecord(Path(row[0]), HandPose(vals[:3 * N_JOINTS]),
                                          SkeletonParams.from_vector(vals[3 * N_JOINTS:])))
    return records


def load_dataset(data_dir):
    """``[(DepthFrame, ManifestRecord)]`` for a generated dataset directory."""
    data_dir = Path(data_dir)
    return [(read_depth_frame(data_dir / r.path), r) for r in read_manifest(data_dir)]


def analytic_normals(params: SkeletonParams, camera: CameraIntrinsics):
    """Re-render the outward normal map for stored parameters."""
    return render_maps(params, camera)[1]
