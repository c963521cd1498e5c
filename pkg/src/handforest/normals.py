"""Per-point surface normals.

Inner points use the smallest-eigenvalue eigenvector of the neighbourhood
covariance, or a one-tree regression forest over depth differences that
predicts the polar angle in its upper layers and the azimuth below.  Edge
points get the in-image-plane normal of the silhouette.  All normals are
signed along the projection ray (``n · p > 0``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .circstats import circular_mean, entropy_table
from .cloud import Cloud, radius_neighbors
from .features import FeatureKind, ImageSurfaces
from .forest import EmptyTrainingSet, TreeBuilder
from .geometry import spherical_from_unit, unit_from_spherical

log = logging.getLogger(__name__)

NEIGHBORHOOD_RADIUS_MM = 10.0


class InsufficientNeighbors(ValueError):
    pass


class DegenerateNeighborhood(ValueError):
    pass


def _ray_sign(n, p):
    return -n if np.dot(n, p) < 0 else n


def pca_normal(cloud: Cloud, index: int, radius_mm: float = NEIGHBORHOOD_RADIUS_MM):
    ids = radius_neighbors(cloud, index, radius_mm)
    if len(ids) < 3:
        raise InsufficientNeighbors(f"{len(ids)} neighbours within {radius_mm} mm")
    q = cloud.points[ids]
    c = q - q.mean(axis=0)
    w, v = np.linalg.eigh(c.T @ c / len(q))
    if w[1] - w[0] < 1e-12:
        raise DegenerateNeighborhood("two smallest eigenvalues coincide")
    return _ray_sign(v[:, 0], cloud.points[index])


def edge_normal(cloud: Cloud, index: int, radius_mm: float = NEIGHBORHOOD_RADIUS_MM):
    n, status = _kernels.edge_normals(cloud.points, cloud.index, cloud.is_edge,
                                      np.array([index], dtype=np.int64),
                                      *cloud.intrinsics.as_array(), float(radius_mm))
    if status[0]:
        raise InsufficientNeighbors("fewer than two edge neighbours")
    return n[0]


def _ray_dirs(pts):
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def edge_normals(cloud: Cloud, ids=None, radius_mm=NEIGHBORHOOD_RADIUS_MM):
    """Silhouette normals for edge points; failures fall back to the ray direction."""
    ids = cloud.edge_ids() if ids is None else np.asarray(ids, dtype=np.int64)
    n, status = _kernels.edge_normals(cloud.points, cloud.index, cloud.is_edge, ids,
                                      *cloud.intrinsics.as_array(), float(radius_mm))
    bad = status != 0
    if np.any(bad):
        n[bad] = _ray_dirs(cloud.points[ids[bad]])
    return n, status


def pca_normals(cloud: Cloud, ids=None, radius_mm=NEIGHBORHOOD_RADIUS_MM):
    """Batch eigen normals for ``ids`` (all inner points by default).

    Returns ``(normals, status)``; failed points carry the ray direction.
    """
    ids = cloud.inner_ids() if ids is None else np.asarray(ids, dtype=np.int64)
    n, status = _kernels.pca_normals(cloud.points, cloud.index, ids,
                                     *cloud.intrinsics.as_array(), float(radius_mm))
    bad = status != 0
    if np.any(bad):
        n[bad] = _ray_dirs(cloud.points[ids[bad]])
    return n, status


def estimate_normals_pca(cloud: Cloud, radius_mm=NEIGHBORHOOD_RADIUS_MM) -> Cloud:
    """Eigen normals on inner points and silhouette normals on edges."""
    normals = np.empty_like(cloud.points)
    inner, edge = cloud.inner_ids(), cloud.edge_ids()
    normals[inner] = pca_normals(cloud, inner, radius_mm)[0]
    normals[edge] = edge_normals(cloud, edge, radius_mm)[0]
    return cloud.with_normals(normals)


@dataclass
class NormalForestParams:
    n_trees: int = 1
    max_depth: int = 20
    layer_split: int = 10
    n_features: int = 200
    n_thresholds: int = 20
    min_leaf: int = 10
    radius_mm: float = NEIGHBORHOOD_RADIUS_MM
    points_per_frame: int = 200
    seed: int = 0


@dataclass
class NormalForest:
    """Trees whose leaves hold ``(theta, phi)``."""

    trees: list
    layer_split: int = 10
    max_depth: int = 20
    radius_mm: float = NEIGHBORHOOD_RADIUS_MM


class VonMisesTreeBuilder(TreeBuilder):
    """Splits on polar-angle gain above ``layer_split`` and azimuth gain below
    (also above it once a node has no polar-angle gain left).

    A leaf's polar angle is the circular mean of the subtree rooted at depth
    ``layer_split`` (its own mean when it sits higher up).
    """

    def __init__(self, *args, theta, phi, layer_split, **kw):
        super().__init__(*args, **kw)
        self.theta = theta
        self.phi = phi
        self.layer_split = layer_split
        self.trig = {
            "theta": (np.cos(theta), np.sin(theta)),
            "phi": (np.cos(phi), np.sin(phi)),
        }
        self.table, self.ds = entropy_table()

    def gains(self, values, thr, rows, depth):
        layers = ("theta", "phi") if depth < self.layer_split else ("phi",)
        for name in layers:
            c, s = self.trig[name]
            g = _kernels.vonmises_gains(values, thr, c[rows], s[rows], float(self.min_leaf),
                                        self.table, self.ds)
            # a node already pure in theta keeps growing on azimuth
            if np.max(g) > 1e-12:
                break
        return g

    def child_context(self, rows, depth, ctx):
        if depth == self.layer_split:
            return float(circular_mean(self.theta[rows]))
        return ctx

    def leaf_value(self, rows, ctx):
        theta = ctx if ctx is not None else float(circular_mean(self.theta[rows]))
        return np.array([theta, float(circular_mean(self.phi[rows]))])


def _identity_rots(m):
    return np.tile(np.eye(3), (m, 1, 1))


def train_normal_forest(training, params: NormalForestParams = NormalForestParams()):
    """Train on ``(cloud, normals)`` pairs; ``normals`` aligns with the cloud's
    points and may contain NaN rows for unlabeled points.  Only inner points
    are used."""
    training = list(training)
    rng = np.random.default_rng(params.seed)
    clouds, fids, pids, targets = [], [], [], []
    for cloud, gt in training:
        gt = np.asarray(gt, dtype=float)
        ok = ~cloud.is_edge & np.all(np.isfinite(gt), axis=1)
        ids = np.flatnonzero(ok)
        if len(ids) == 0:
            continue
        if len(ids) > params.points_per_frame:
            ids = np.sort(rng.choice(ids, params.points_per_frame, replace=False))
        n = gt[ids]
        flip = np.sum(n * cloud.points[ids], axis=1) < 0
        n[flip] = -n[flip]
        fids.append(np.full(len(ids), len(clouds), dtype=np.int64))
        pids.append(ids)
        targets.append(n)
        clouds.append(cloud)
    if not clouds:
        raise EmptyTrainingSet("no labeled inner points")
    fids = np.concatenate(fids)
    pids = np.concatenate(pids)
    n = np.concatenate(targets)
    theta, phi = spherical_from_unit(n)
    source = ImageSurfaces(clouds, need_normals=False)
    pts = source.positions(fids, pids)
    rots = _identity_rots(len(fids))
    trees = []
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)
    for t in range(params.n_trees):
        trng = np.random.default_rng(seeds[t])
        b = VonMisesTreeBuilder(source, FeatureKind.DEPTH_DIFF, fids, pts, rots,
                                theta=theta, phi=phi, layer_split=params.layer_split,
                                max_depth=params.max_depth, n_features=params.n_features,
                                n_thresholds=params.n_thresholds, min_leaf=params.min_leaf,
                                offset_range_mm=params.radius_mm, ball_offsets=True, rng=trng)
        # every tree sees all points: randomness comes from the feature draws
        trees.append(b.build(np.arange(len(fids))))
        log.debug("normal tree %d: %d nodes", t, trees[-1].n_nodes)
    return NormalForest(trees, params.layer_split, params.max_depth, params.radius_mm)


def predict_angles(forest: NormalForest, cloud: Cloud, ids):
    ids = np.asarray(ids, dtype=np.int64)
    source = ImageSurfaces([cloud], need_normals=False)
    fids = np.zeros(len(ids), dtype=np.int64)
    pts = np.ascontiguousarray(cloud.points[ids])
    rots = _identity_rots(len(ids))
    leaves = [t.values[source.route(t, FeatureKind.DEPTH_DIFF, fids, pts, rots)]
              for t in forest.trees]
    ang = np.stack(leaves, axis=-1)  # (m, 2, n_trees)
    if ang.shape[-1] == 1:
        return ang[:, 0, 0], ang[:, 1, 0]
    return circular_mean(ang[:, 0]), circular_mean(ang[:, 1])


def predict_normals(forest: NormalForest, cloud: Cloud) -> Cloud:
    """Fill normals: forest for inner points, silhouette normals for edges."""
    normals = np.empty_like(cloud.points)
    inner, edge = cloud.inner_ids(), cloud.edge_ids()
    if len(inner):
        theta, phi = predict_angles(forest, cloud, inner)
        n = unit_from_spherical(theta, phi)
        flip = np.sum(n * cloud.points[inner], axis=1) < 0
        n[flip] = -n[flip]
        normals[inner] = n
    if len(edge):
        normals[edge] = edge_normals(cloud, edge, forest.radius_mm)[0]
    return cloud.with_normals(normals)


def angular_error_deg(a, b):
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))
