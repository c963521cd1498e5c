"""Random difference features conditioned on a local frame.

Two probe offsets are rotated into the camera frame by the frame pose and
added to the input point.  Probes are resolved either through the pixel
index of a :class:`~handforest.cloud.Cloud` or, for analytic point sets,
by nearest neighbour in 3D (which commutes exactly with rigid motion).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .cloud import BACKGROUND, Cloud

BACKGROUND_DEPTH_MM = 10_000.0
BACKGROUND_NORMAL = np.array([0.0, 0.0, 1.0])
DEFAULT_OFFSET_RANGE_MM = 60.0
WRIST_OFFSET_RANGE_MM = 120.0


class FeatureKind(enum.IntEnum):
    DEPTH_DIFF = _kernels.DEPTH_DIFF
    NORMAL_DIFF = _kernels.NORMAL_DIFF

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).lower()
        if key in ("depth", "depthdiff", "depth_diff"):
            return cls.DEPTH_DIFF
        if key in ("normal", "normaldiff", "normal_diff"):
            return cls.NORMAL_DIFF
        raise ValueError(f"unknown feature kind {name!r}")


class MissingNormals(ValueError):
    """A normal-difference feature was requested on a surface without normals."""


@dataclass(frozen=True)
class OffsetPair:
    delta1: np.ndarray
    delta2: np.ndarray

    def as_array(self):
        return np.concatenate([self.delta1, self.delta2])


@dataclass(frozen=True)
class FeatureDescriptor:
    kind: FeatureKind
    offsets: OffsetPair


def sample_offsets(rng, n, range_mm, ball=False):
    """``n`` offset pairs as an ``(n, 6)`` array of float32-representable values.

    Uniform on the cube ``[-range_mm, range_mm]³`` (or the ball of that radius).
    """
    if not range_mm > 0:
        raise ValueError("range_mm must be positive")
    if not ball:
        out = rng.uniform(-range_mm, range_mm, size=(n, 6))
    else:
        out = np.empty((n, 6))
        for half in (slice(0, 3), slice(3, 6)):
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            d *= range_mm * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
            out[:, half] = d
    return out.astype(np.float32).astype(float)


def sample_offset_pair(rng, range_mm=DEFAULT_OFFSET_RANGE_MM) -> OffsetPair:
    d = sample_offsets(rng, 1, range_mm)[0]
    return OffsetPair(d[:3], d[3:])


def offset_position(p, delta, frame):
    """Probe position ``p + R δ`` for frame pose ``R``."""
    return np.asarray(p, dtype=float) + frame.pose @ np.asarray(delta, dtype=float)


def _point(surface, index):
    return surface.points[index]


def depth_diff(surface, index, frame, offsets: OffsetPair) -> float:
    p = _point(surface, index)
    vals = []
    for d in (offsets.delta1, offsets.delta2):
        pid = surface.lookup(offset_position(p, d, frame))
        vals.append(BACKGROUND_DEPTH_MM if pid == BACKGROUND else float(surface.depth_at(pid)))
    return vals[0] - vals[1]


def normal_diff(surface, index, frame, offsets: OffsetPair) -> float:
    if getattr(surface, "normals", None) is None:
        raise MissingNormals("surface normals have not been computed")
    p = _point(surface, index)
    ns = []
    for d in (offsets.delta1, offsets.delta2):
        pid = surface.lookup(offset_position(p, d, frame))
        ns.append(BACKGROUND_NORMAL if pid == BACKGROUND else surface.normal_at(pid))
    return float(np.dot(ns[0], ns[1]))


def evaluate(surface, index, frame, descriptor: FeatureDescriptor) -> float:
    if descriptor.kind == FeatureKind.DEPTH_DIFF:
        return depth_diff(surface, index, frame, descriptor.offsets)
    return normal_diff(surface, index, frame, descriptor.offsets)


class PointSetSurface:
    """Analytic point samples with exact normals.

    A probe resolves to the nearest stored point, or to background when that
    point is farther than ``max_gap_mm``.  "Depth" is the camera z of the hit.
    """

    def __init__(self, points, normals=None, max_gap_mm=3.0):
        self.points = np.ascontiguousarray(points, dtype=float)
        self.normals = None if normals is None else np.ascontiguousarray(normals, dtype=float)
        self.max_gap_mm = float(max_gap_mm)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def transformed(self, T):
        normals = None if self.normals is None else T.rotate(self.normals)
        return PointSetSurface(T.apply(self.points), normals, self.max_gap_mm)

    def lookup_many(self, q):
        q = np.asarray(q, dtype=float)
        dist, idx = self._tree.query(q)
        return np.where(dist <= self.max_gap_mm, idx, BACKGROUND)

    def lookup(self, q):
        return int(self.lookup_many(np.asarray(q, dtype=float)[None])[0])

    def depth_at(self, pid):
        return self.points[pid, 2]

    def normal_at(self, pid):
        return self.normals[pid]


class ImageSurfaces:
    """Cropped pixel-to-point index images of several clouds, packed for the
    compiled probe kernels together with per-point depth and normals."""

    def __init__(self, clouds, need_normals):
        metas, intrs, pixs, zs, normals = [], [], [], [], []
        base = 0
        offset = 0
        for c in clouds:
            r0, c0 = c.pixels.min(axis=0)
            r1, c1 = c.pixels.max(axis=0)
            h, w = r1 - r0 + 1, c1 - c0 + 1
            img = np.full((h, w), -1, dtype=np.int32)
            img[c.pixels[:, 0] - r0, c.pixels[:, 1] - c0] = offset + np.arange(len(c.points))
            if need_normals:
                if c.normals is None:
                    raise MissingNormals("cloud normals are required for normal features")
                normals.append(c.normals)
            metas.append((base, r0, c0, h, w))
            intrs.append(c.intrinsics.as_array())
            pixs.append(img.ravel())
            zs.append(c.points[:, 2])
            base += h * w
            offset += len(c.points)
        self.meta = np.array(metas, dtype=np.int64).reshape(-1, 5)
        self.intr = np.array(intrs, dtype=float).reshape(-1, 4)
        self.pix = np.concatenate(pixs) if pixs else np.zeros(0, dtype=np.int32)
        self.zs = np.ascontiguousarray(np.concatenate(zs) if zs else np.zeros(0))
        # depth-only sources never read normals
        self.normals = np.ascontiguousarray(np.concatenate(normals) if normals else np.zeros((1, 3)))
        self.points = [c.points for c in clouds]

    def positions(self, fids, pids):
        out = np.empty((len(fids), 3))
        for f in np.unique(fids):
            sel = fids == f
            out[sel] = self.points[f][pids[sel]]
        return out

    def _args(self):
        return self.meta, self.intr, self.pix, self.zs, self.normals, BACKGROUND_DEPTH_MM

    def values(self, kind, fids, pts, rots, offsets):
        return _kernels.image_values(np.ascontiguousarray(offsets), int(kind), fids, pts, rots,
                                     *self._args())

    def values_paired(self, kind, fids, pts, rots, offsets):
        return _kernels.image_values_paired(np.ascontiguousarray(offsets), int(kind), fids, pts,
                                            rots, *self._args())

    def route(self, tree, kind, fids, pts, rots):
        return _kernels.route_images(tree.offsets, tree.thresholds, tree.right, tree.leaf,
                                     int(kind), fids, pts, rots, *self._args())


class PointSets:
    """Feature source over :class:`PointSetSurface` objects (reference path)."""

    def __init__(self, surfaces, need_normals):
        if need_normals and any(s.normals is None for s in surfaces):
            raise MissingNormals("point sets need normals for normal features")
        self.surfaces = list(surfaces)
        self.points = [s.points for s in self.surfaces]

    def positions(self, fids, pids):
        out = np.empty((len(fids), 3))
        for f in np.unique(fids):
            sel = fids == f
            out[sel] = self.points[f][pids[sel]]
        return out

    def _probe_values(self, kind, fids, q1, q2):
        out = np.empty(q1.shape[:-1])
        for f in np.unique(fids):
            s = self.surfaces[f]
            sel = fids == f
            a = s.lookup_many(q1[..., sel, :].reshape(-1, 3))
            b = s.lookup_many(q2[..., sel, :].reshape(-1, 3))
            if kind == FeatureKind.DEPTH_DIFF:
                da = np.where(a >= 0, s.points[a, 2], BACKGROUND_DEPTH_MM)
                db = np.where(b >= 0, s.points[b, 2], BACKGROUND_DEPTH_MM)
                v = da - db
            else:
                na = np.where((a >= 0)[:, None], s.normals[a], BACKGROUND_NORMAL)
                nb = np.where((b >= 0)[:, None], s.normals[b], BACKGROUND_NORMAL)
                v = np.sum(na * nb, axis=1)
            out[..., sel] = v.reshape(out[..., sel].shape)
        return out

    def values(self, kind, fids, pts, rots, offsets):
        q1 = pts[None] + np.einsum("mij,kj->kmi", rots, offsets[:, :3])
        q2 = pts[None] + np.einsum("mij,kj->kmi", rots, offsets[:, 3:])
        return self._probe_values(kind, fids, q1, q2)

    def values_paired(self, kind, fids, pts, rots, offsets):
        q1 = pts + np.einsum("mij,mj->mi", rots, offsets[:, :3])
        q2 = pts + np.einsum("mij,mj->mi", rots, offsets[:, 3:])
        return self._probe_values(kind, fids, q1, q2)

    def route(self, tree, kind, fids, pts, rots):
        node = np.zeros(len(fids), dtype=np.int64)
        while True:
            active = tree.leaf[node] < 0
            if not np.any(active):
                return tree.leaf[node].astype(np.int64)
            idx = np.flatnonzero(active)
            nd = node[idx]
            v = self.values_paired(kind, fids[idx], pts[idx], rots[idx], tree.offsets[nd])
            node[idx] = np.where(v < tree.thresholds[nd], nd + 1, tree.right[nd])


def make_source(surfaces, kind):
    """Pick the compiled image source for clouds, the KD-tree source otherwise."""
    need_normals = FeatureKind(kind) == FeatureKind.NORMAL_DIFF
    surfaces = list(surfaces)
    if all(isinstance(s, Cloud) for s in surfaces):
        return ImageSurfaces(surfaces, need_normals)
    return PointSets(surfaces, need_normals)
