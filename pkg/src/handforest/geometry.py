"""Rotations, rigid transforms, local frames and closed-form rigid alignment.

Vectors are plain ``numpy`` arrays of shape ``(3,)`` and rotations are
``(3, 3)`` arrays whose columns are the frame axes.  Positions are in
millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9
HANDED_TOL = 1e-6
PARALLEL_TOL = 1e-6


class DegenerateFrame(ValueError):
    """Raised when axes cannot span a proper orthonormal frame."""


class DegenerateConfiguration(ValueError):
    """Raised when a point configuration does not determine a rigid transform."""


def normalize(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise DegenerateFrame("cannot normalize a zero or non-finite vector")
    return v / n


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, angle):
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    k = normalize(axis)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_rotation(rng):
    """Uniformly distributed rotation (from a normalized Gaussian quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def is_rotation(R, tol=ORTHO_TOL):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts):
        """Apply to a single point ``(3,)`` or an array of points ``(n, 3)``."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotate(self, vecs):
        return np.asarray(vecs, dtype=float) @ self.rotation.T

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


@dataclass(frozen=True)
class LocalFrame:
    """A local reference frame: ``pose`` columns are the x, y, z axes in camera
    coordinates and ``origin`` is the frame origin in camera coordinates."""

    pose: np.ndarray
    origin: np.ndarray

    @property
    def x(self):
        return self.pose[:, 0]

    @property
    def y(self):
        return self.pose[:, 1]

    @property
    def z(self):
        return self.pose[:, 2]

    def is_valid(self, tol=HANDED_TOL):
        R = self.pose
        return (is_rotation(R, tol)
                and np.max(np.abs(np.cross(R[:, 0], R[:, 1]) - R[:, 2])) <= tol)

    def transformed(self, T: RigidTransform):
        """The frame carried along by a rigid motion (pose ``R̄ R``, origin ``T(o)``)."""
        return LocalFrame(T.rotation @ self.pose, T.apply(self.origin))


def frame_from_axes(x, y, z, origin=(0.0, 0.0, 0.0)):
    """Build a right-handed orthonormal frame from approximate axes.

    ``z`` is kept exactly (after normalization), ``y`` is projected
    orthogonal to ``z`` and ``x`` is recomputed as ``y × z``.
    """
    axes = []
    for a in (x, y, z):
        a = np.asarray(a, dtype=float)
        n = np.linalg.norm(a)
        if n == 0.0 or not np.isfinite(n):
            raise DegenerateFrame("zero-length axis")
        axes.append(a / n)
    ux, uy, uz = axes
    for a, b in ((ux, uy), (uy, uz), (ux, uz)):
        if np.linalg.norm(np.cross(a, b)) < PARALLEL_TOL:
            raise DegenerateFrame("parallel axes")
    uy = uy - np.dot(uy, uz) * uz
    uy /= np.linalg.norm(uy)
    ux = np.cross(uy, uz)
    return LocalFrame(np.column_stack([ux, uy, uz]), np.asarray(origin, dtype=float).copy())


def to_local(frame: LocalFrame, offset):
    """Express a camera-frame offset in frame coordinates (``Rᵀ o``)."""
    return np.asarray(offset, dtype=float) @ frame.pose


def from_local(frame: LocalFrame, offset):
    """Map a frame-local offset back to camera coordinates (``R õ``)."""
    return np.asarray(offset, dtype=float) @ frame.pose.T


def spherical_from_unit(n):
    """Return ``(theta, phi)`` of a unit vector; works row-wise on ``(m, 3)``.

    ``theta`` is the polar angle from the camera +z axis and ``phi`` the
    image-plane azimuth; ``phi`` is 0 at the poles.
    """
    n = np.asarray(n, dtype=float)
    z = np.clip(n[..., 2], -1.0, 1.0)
    theta = np.arccos(z)
    pole = (n[..., 0] == 0.0) & (n[..., 1] == 0.0)
    phi = np.where(pole, 0.0, np.arctan2(n[..., 1], n[..., 0]))
    if np.ndim(phi) == 0:
        phi = float(phi)
        if phi == -np.pi:
            phi = np.pi
        return float(theta), phi
    phi = np.where(phi == -np.pi, np.pi, phi)
    return theta, phi


def unit_from_spherical(theta, phi):
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def kabsch_align(src, dst):
    """Least-squares rigid transform mapping ``src`` points onto ``dst``.

    Correspondences are by index.  The determinant correction keeps the
    result a proper rotation even when the plain SVD solution reflects.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both be (n, 3)")
    if src.shape[0] < 3:
        raise DegenerateConfiguration("need at least three correspondences")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    A = src - cs
    B = dst - cd
    H = A.T @ B
    U, S, Vt = np.linalg.svd(H)
    scale = max(S[0], 1e-300)
    if S[1] <= 1e-12 * scale or np.linalg.matrix_rank(A, tol=1e-9 * max(np.abs(A).max(), 1.0)) < 2:
        raise DegenerateConfiguration("points are collinear or coincident")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cd - R @ cs
    return RigidTransform(R, t)
