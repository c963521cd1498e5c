"""Independent reference computations used as test oracles.

Nothing here imports the implementation under test; each oracle takes a
different route (arbitrary precision, brute force, quadrature, closed-form
geometry) to the quantity being checked.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np
from scipy import integrate


# circular statistics ---------------------------------------------------------

def bessel_ratio_mp(kappa, dps=30):
    """``I1(κ)/I0(κ)`` in arbitrary precision."""
    with mpmath.workdps(dps):
        k = mpmath.mpf(kappa)
        return float(mpmath.besseli(1, k) / mpmath.besseli(0, k))


def kappa_mp(rbar, dps=30):
    """Solve ``I1(κ)/I0(κ) = R̄`` by bisection in arbitrary precision."""
    with mpmath.workdps(dps):
        r = mpmath.mpf(rbar)
        lo, hi = mpmath.mpf(0), mpmath.mpf(1)
        while mpmath.besseli(1, hi) / mpmath.besseli(0, hi) < r:
            hi *= 2
        for _ in range(200):
            mid = (lo + hi) / 2
            if mpmath.besseli(1, mid) / mpmath.besseli(0, mid) < r:
                lo = mid
            else:
                hi = mid
        return float((lo + hi) / 2)


def vm_grid_mle(angles, n_mu=4096, kappa_grid=None):
    """Brute-force maximum likelihood over a ``μ`` grid and a log-spaced ``κ`` grid."""
    a = np.asarray(angles, dtype=float)
    mus = -np.pi + 2 * np.pi * np.arange(n_mu) / n_mu
    if kappa_grid is None:
        kappa_grid = np.geomspace(1e-3, 1e3, 4001)
    # sum cos(a - mu) for each mu
    sc = np.cos(a).sum() * np.cos(mus) + np.sin(a).sum() * np.sin(mus)
    mu = mus[np.argmax(sc)]
    best = sc.max()
    from scipy.special import i0e

    # log L = κ Σcos(a-μ) - n (log 2π + log I0(κ))
    ll = kappa_grid * best - len(a) * (np.log(2 * np.pi) + np.log(i0e(kappa_grid)) + kappa_grid)
    return float(mu), float(kappa_grid[np.argmax(ll)])


def vm_entropy_quad(kappa):
    """``-∫ p ln p`` of the Von Mises density on the circle by adaptive quadrature."""
    i0 = float(mpmath.besseli(0, kappa))

    def f(t):
        p = math.exp(kappa * math.cos(t)) / (2 * math.pi * i0)
        return -p * math.log(p)

    val, _ = integrate.quad(f, -math.pi, math.pi, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


# geometry --------------------------------------------------------------------

def rotation_from_quaternion(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def orthonormal_right_handed(R, tol):
    R = np.asarray(R, dtype=float)
    return (np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and np.max(np.abs(np.cross(R[:, 0], R[:, 1]) - R[:, 2])) <= tol)


# clouds ----------------------------------------------------------------------

def brute_neighbors(points, index, radius):
    d = np.sqrt(np.sum((points - points[index]) ** 2, axis=1))
    return np.flatnonzero(d <= radius)


def plane_depth(K, z, rows=None, cols=None):
    """Constant-depth grid, optionally restricted to a pixel rectangle."""
    d = np.zeros((K.height, K.width))
    rs = slice(None) if rows is None else slice(*rows)
    cs = slice(None) if cols is None else slice(*cols)
    d[rs, cs] = z
    return d


def sphere_depth(K, center, radius):
    """Ray-cast depth and outward normals of a sphere, pixel by pixel."""
    H, W = K.height, K.width
    depth = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    c = np.asarray(center, dtype=float)
    for v in range(H):
        for u in range(W):
            d = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
            # |t d - c|^2 = r^2
            a = d @ d
            b = -2 * d @ c
            cc = c @ c - radius * radius
            disc = b * b - 4 * a * cc
            if disc < 0:
                continue
            t = (-b - math.sqrt(disc)) / (2 * a)
            p = t * d
            depth[v, u] = p[2]
            normal[v, u] = (p - c) / radius
    return depth, normal


def capsule_point_distance(a, b, p):
    a, b, p = (np.asarray(x, dtype=float) for x in (a, b, p))
    ab = b - a
    t = min(max(np.dot(p - a, ab) / np.dot(ab, ab), 0.0), 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def tilted_plane_depth(K, normal, offset, rows=None, cols=None):
    """Ray-cast depth of the plane ``normal · p = offset``, pixel by pixel."""
    n = np.asarray(normal, dtype=float)
    depth = plane_depth(K, 0.0)
    rs = range(K.height) if rows is None else range(*rows)
    cs = range(K.width) if cols is None else range(*cols)
    for v in rs:
        for u in cs:
            d = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
            t = offset / (n @ d)
            if t > 0:
                depth[v, u] = t
    return depth
