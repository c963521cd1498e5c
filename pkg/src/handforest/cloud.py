"""Depth frames, back-projection to pixel-indexed 2.5D clouds, silhouette
edges, radius neighbourhoods and the HCDF depth file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

DEFAULT_EDGE_JUMP_MM = 25.0
BACKGROUND = -1
"""Point id returned by :func:`lookup_pixel` for probes that miss the cloud."""

HCDF_MAGIC = b"HCDF"
HCDF_VERSION = 1
_HCDF_HEADER = struct.Struct("<4sHII5f")


class EmptyFrame(ValueError):
    """The depth frame contains no valid pixels."""


class DepthFormatError(ValueError):
    """A depth file is malformed."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.125

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @classmethod
    def default(cls):
        return cls(475.0, 475.0, 160.0, 120.0, 320, 240, 0.125)

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)

    def project(self, pts):
        """Continuous pixel coordinates ``(u, v)`` of camera points."""
        pts = np.asarray(pts, dtype=float)
        u = self.fx * pts[..., 0] / pts[..., 2] + self.cx
        v = self.fy * pts[..., 1] / pts[..., 2] + self.cy
        return u, v


@dataclass(frozen=True)
class DepthFrame:
    intrinsics: CameraIntrinsics
    depth: np.ndarray  # (height, width) millimetres, 0 = missing

    def __post_init__(self):
        d = self.depth
        K = self.intrinsics
        if d.shape != (K.height, K.width):
            raise ValueError(f"depth grid {d.shape} does not match {K.height}x{K.width}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depth must be finite and non-negative")


@dataclass(frozen=True)
class Cloud:
    """Back-projected 2.5D point cloud indexed by pixel.

    ``pixels[i]`` is the ``(row, col)`` of point ``i`` and ``index[row, col]``
    is the inverse map (``BACKGROUND`` where the depth is missing).
    """

    frame: DepthFrame
    points: np.ndarray
    pixels: np.ndarray
    index: np.ndarray
    is_edge: np.ndarray
    normals: np.ndarray | None = None

    def __len__(self):
        return len(self.points)

    @property
    def intrinsics(self):
        return self.frame.intrinsics

    def with_normals(self, normals):
        normals = np.asarray(normals, dtype=float)
        if normals.shape != self.points.shape:
            raise ValueError("normals must match points")
        return replace(self, normals=normals)

    def inner_ids(self):
        return np.flatnonzero(~self.is_edge)

    def edge_ids(self):
        return np.flatnonzero(self.is_edge)

    # probe interface shared with analytic point sets (see features)
    def lookup(self, q):
        return lookup_pixel(self, q)

    def depth_at(self, pid):
        return self.points[pid, 2]

    def normal_at(self, pid):
        if self.normals is None:
            raise AttributeError("cloud has no normals")
        return self.normals[pid]


def backproject(frame: DepthFrame, jump_mm: float = DEFAULT_EDGE_JUMP_MM) -> Cloud:
    """Back-project every pixel with positive depth and classify edges."""
    K = frame.intrinsics
    d = np.asarray(frame.depth, dtype=float)
    rows, cols = np.nonzero(d > 0)
    if rows.size == 0:
        raise EmptyFrame("no valid depth pixels")
    z = d[rows, cols]
    pts = np.column_stack([(cols - K.cx) * z / K.fx, (rows - K.cy) * z / K.fy, z])
    index = np.full(d.shape, BACKGROUND, dtype=np.int32)
    index[rows, cols] = np.arange(rows.size)
    cloud = Cloud(frame, pts, np.column_stack([rows, cols]).astype(np.int32), index,
                  np.zeros(rows.size, dtype=bool))
    return classify_edges(cloud, jump_mm)


def classify_edges(cloud: Cloud, jump_mm: float = DEFAULT_EDGE_JUMP_MM) -> Cloud:
    """A point is an edge iff one of its 8 neighbours is missing, outside the
    image, or differs in depth by more than ``jump_mm``."""
    if not jump_mm > 0:
        raise ValueError("jump_mm must be positive")
    d = np.asarray(cloud.frame.depth, dtype=float)
    H, W = d.shape
    pad = np.zeros((H + 2, W + 2))
    pad[1:-1, 1:-1] = d
    edge = np.zeros((H, W), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = pad[1 + dr:1 + dr + H, 1 + dc:1 + dc + W]
            edge |= (nb <= 0) | (np.abs(nb - d) > jump_mm)
    r, c = cloud.pixels[:, 0], cloud.pixels[:, 1]
    return replace(cloud, is_edge=edge[r, c])


def pixel_window(K: CameraIntrinsics, p, radius_mm):
    """Inclusive pixel bounds ``(r0, r1, c0, c1)`` covering the projection of the
    axis-aligned cube ``p ± radius_mm``; every point of the ball lies inside.

    Projection is monotone in each coordinate over the cube, so the corner
    projections bound it.  Requires ``p[2] > radius_mm``.
    """
    x, y, z = p
    zs = (z - radius_mm, z + radius_mm)
    us = [K.fx * (x + sx) / sz + K.cx for sx in (-radius_mm, radius_mm) for sz in zs]
    vs = [K.fy * (y + sy) / sz + K.cy for sy in (-radius_mm, radius_mm) for sz in zs]
    c0 = max(int(np.floor(min(us))), 0)
    c1 = min(int(np.ceil(max(us))), K.width - 1)
    r0 = max(int(np.floor(min(vs))), 0)
    r1 = min(int(np.ceil(max(vs))), K.height - 1)
    return r0, r1, c0, c1


def radius_neighbors(cloud: Cloud, index: int, radius_mm: float) -> np.ndarray:
    """Ids of all points within ``radius_mm`` (3D) of point ``index``, itself included."""
    if not radius_mm > 0:
        raise ValueError("radius must be positive")
    p = cloud.points[index]
    if p[2] <= radius_mm:
        ids = np.arange(len(cloud))
    else:
        r0, r1, c0, c1 = pixel_window(cloud.intrinsics, p, radius_mm)
        ids = cloud.index[r0:r1 + 1, c0:c1 + 1].ravel()
        ids = ids[ids >= 0]
    dist2 = np.sum((cloud.points[ids] - p) ** 2, axis=1)
    return np.sort(ids[dist2 <= radius_mm * radius_mm])


def project_to_pixel(K: CameraIntrinsics, q):
    """Nearest pixel ``(row, col)`` of a camera point, or ``None`` if outside the image."""
    q = np.asarray(q, dtype=float)
    if not q[2] > 0:
        return None
    u = np.floor(K.fx * q[0] / q[2] + K.cx + 0.5)
    v = np.floor(K.fy * q[1] / q[2] + K.cy + 0.5)
    if not (0 <= u < K.width and 0 <= v < K.height):
        return None
    return int(v), int(u)


def lookup_pixel(cloud: Cloud, q) -> int:
    """Point id at the pixel that ``q`` projects to, or :data:`BACKGROUND`."""
    rc = project_to_pixel(cloud.intrinsics, q)
    if rc is None:
        return BACKGROUND
    return int(cloud.index[rc])


def deep_interior_mask(cloud: Cloud, depth_px: int = 2) -> np.ndarray:
    """Inner points with no edge point within ``depth_px`` pixels (Chebyshev)."""
    H, W = cloud.index.shape
    edge_img = np.zeros((H, W), dtype=bool)
    edge_img[cloud.pixels[cloud.is_edge, 0], cloud.pixels[cloud.is_edge, 1]] = True
    near = np.zeros((H + 2 * depth_px, W + 2 * depth_px), dtype=bool)
    for dr in range(-depth_px, depth_px + 1):
        for dc in range(-depth_px, depth_px + 1):
            near[depth_px + dr:depth_px + dr + H, depth_px + dc:depth_px + dc + W] |= edge_img
    near = near[depth_px:depth_px + H, depth_px:depth_px + W]
    r, c = cloud.pixels[:, 0], cloud.pixels[:, 1]
    return ~cloud.is_edge & ~near[r, c]


def write_depth_frame(path, frame: DepthFrame) -> None:
    K = frame.intrinsics
    scale = np.float32(K.depth_scale)
    raw = np.rint(np.asarray(frame.depth, dtype=float) / float(scale))
    if raw.max(initial=0) > 65535:
        raise ValueError("depth exceeds the u16 range for this depth_scale")
    header = _HCDF_HEADER.pack(HCDF_MAGIC, HCDF_VERSION, K.width, K.height,
                               K.fx, K.fy, K.cx, K.cy, K.depth_scale)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raw.astype("<u2").tobytes())


def read_depth_frame(path) -> DepthFrame:
    data = Path(path).read_bytes()
    if len(data) < _HCDF_HEADER.size:
        raise DepthFormatError(f"{path}: truncated header")
    magic, version, w, h, fx, fy, cx, cy, scale = _HCDF_HEADER.unpack_from(data)
    if magic != HCDF_MAGIC:
        raise DepthFormatError(f"{path}: bad magic {magic!r}")
    if version != HCDF_VERSION:
        raise DepthFormatError(f"{path}: unsupported version {version}")
    n = w * h
    if len(data) != _HCDF_HEADER.size + 2 * n:
        raise DepthFormatError(f"{path}: expected {n} samples")
    raw = np.frombuffer(data, dtype="<u2", offset=_HCDF_HEADER.size).reshape(h, w)
    K = CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h), float(scale))
    return DepthFrame(K, (raw * float(scale)).astype(np.float32))
