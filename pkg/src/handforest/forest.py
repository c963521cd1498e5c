"""Frame conditioned regression forests.

Training targets are joint offsets rotated into each sample's local frame
(``õ = Rᵀ o``).  Splits minimise the summed trace of the offset covariance of
the children (a uni-modal Gaussian model), leaves hold the mean-shift mode of
each joint's local offsets, and predictions are rotated back (``o = R õ``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .features import DEFAULT_OFFSET_RANGE_MM, FeatureKind, make_source, sample_offsets
from .geometry import LocalFrame

log = logging.getLogger(__name__)

DEFAULT_BANDWIDTH_MM = 10.0
MEAN_SHIFT_TOL_MM = 0.01
MEAN_SHIFT_MAX_ITER = 100


class EmptyTrainingSet(ValueError):
    """No training samples were supplied."""


@dataclass
class Tree:
    """A binary tree stored in pre-order: node ``i``'s left child is ``i + 1``.

    Internal nodes have ``leaf[i] == -1``; leaves index into ``values``.
    """

    offsets: np.ndarray
    thresholds: np.ndarray
    right: np.ndarray
    leaf: np.ndarray
    values: np.ndarray

    @property
    def n_nodes(self):
        return len(self.leaf)

    def depth(self):
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.leaf[node] < 0:
                stack.append((node + 1, d + 1))
                stack.append((int(self.right[node]), d + 1))
        return best

    def same_structure(self, other):
        return (np.array_equal(self.leaf, other.leaf) and np.array_equal(self.right, other.right)
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.thresholds, other.thresholds))


@dataclass
class ForestParams:
    n_trees: int = 5
    max_depth: int = 20
    n_features: int = 100
    n_thresholds: int = 10
    min_leaf: int = 5
    bagging: float = 0.7
    offset_range_mm: float = DEFAULT_OFFSET_RANGE_MM
    bandwidth_mm: float = DEFAULT_BANDWIDTH_MM
    seed: int = 0


@dataclass
class TrainingSample:
    cloud_id: int
    point_id: int
    frame: LocalFrame
    target_offsets: np.ndarray


@dataclass
class Samples:
    """Struct-of-arrays training set: ``targets`` are camera-frame offsets
    ``(m, n_joints, 3)`` from each sample point to its joints."""

    cloud_ids: np.ndarray
    point_ids: np.ndarray
    rotations: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.cloud_ids)

    @classmethod
    def from_list(cls, samples):
        samples = list(samples)
        if not samples:
            return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3, 3)),
                       np.zeros((0, 0, 3)))
        return cls(np.array([s.cloud_id for s in samples], dtype=np.int64),
                   np.array([s.point_id for s in samples], dtype=np.int64),
                   np.array([s.frame.pose for s in samples], dtype=float),
                   np.array([np.asarray(s.target_offsets, dtype=float).reshape(-1, 3)
                             for s in samples]))

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.from_list([])
        return cls(np.concatenate([p.cloud_ids for p in parts]),
                   np.concatenate([p.point_ids for p in parts]),
                   np.concatenate([p.rotations for p in parts]),
                   np.concatenate([p.targets for p in parts]))


@dataclass
class FcrfModel:
    trees: list
    n_joints: int
    stage: str
    kind: FeatureKind
    axis_constraint: int | None = None
    max_depth: int = 20


@dataclass
class NodeRecord:
    """Split diagnostics kept when a builder runs with ``record=True``."""

    node: int
    gains: np.ndarray
    best: tuple


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(float)


class TreeBuilder:
    """Greedy depth-first tree growth over a feature source.

    Subclasses supply the split scorer and the leaf value.
    """

    def __init__(self, source, kind, fids, pts, rots, *, max_depth, n_features, n_thresholds,
                 min_leaf, offset_range_mm, rng, ball_offsets=False, record=False):
        self.source = source
        self.kind = FeatureKind(kind)
        self.fids = fids
        self.pts = pts
        self.rots = rots
        self.max_depth = max_depth
        self.n_features = n_features
        self.n_thresholds = n_thresholds
        self.min_leaf = min_leaf
        self.offset_range_mm = offset_range_mm
        self.ball_offsets = ball_offsets
        self.rng = rng
        self.records = [] if record else None

    # hooks
    def gains(self, values, thr, rows, depth):
        raise NotImplementedError

    def leaf_value(self, rows, ctx):
        raise NotImplementedError

    def child_context(self, rows, depth, ctx):
        return ctx

    def build(self, rows):
        self._off, self._thr, self._right, self._leaf, self._values = [], [], [], [], []
        self._grow(np.asarray(rows, dtype=np.int64), 0, None)
        return Tree(np.array(self._off, dtype=float).reshape(-1, 6),
                    np.array(self._thr, dtype=float),
                    np.array(self._right, dtype=np.int64),
                    np.array(self._leaf, dtype=np.int64),
                    np.array(self._values, dtype=float))

    def _make_leaf(self, node, rows, ctx):
        self._leaf[node] = len(self._values)
        self._values.append(_f32(self.leaf_value(rows, ctx)))

    def _grow(self, rows, depth, ctx):
        node = len(self._leaf)
        self._off.append(np.zeros(6))
        self._thr.append(0.0)
        self._right.append(-1)
        self._leaf.append(-1)
        ctx = self.child_context(rows, depth, ctx)
        m = len(rows)
        if depth >= self.max_depth or m < 2 * self.min_leaf:
            self._make_leaf(node, rows, ctx)
            return node
        offsets = sample_offsets(self.rng, self.n_features, self.offset_range_mm, self.ball_offsets)
        values = self.source.values(self.kind, self.fids[rows], self.pts[rows], self.rots[rows],
                                    offsets)
        q = np.arange(1, self.n_thresholds + 1) / (self.n_thresholds + 1)
        thr = np.ascontiguousarray(_f32(np.quantile(values, q, axis=1, method="nearest").T))
        gains = self.gains(values, thr, rows, depth)
        flat = int(np.argmax(gains))
        k, t = divmod(flat, self.n_thresholds)
        best = gains[k, t]
        if self.records is not None:
            self.records.append(NodeRecord(node, gains, (k, t)))
        if not np.isfinite(best) or best <= 1e-12:
            self._make_leaf(node, rows, ctx)
            return node
        left = values[k] < thr[k, t]
        self._off[node] = offsets[k]
        self._thr[node] = thr[k, t]
        self._grow(rows[left], depth + 1, ctx)
        self._right[node] = self._grow(rows[~left], depth + 1, ctx)
        return node


class GaussianTreeBuilder(TreeBuilder):
    def __init__(self, *args, local_targets, bandwidth_mm, **kw):
        super().__init__(*args, **kw)
        self.local = local_targets
        self.flat = np.ascontiguousarray(local_targets.reshape(len(local_targets), -1))
        self.bandwidth_mm = bandwidth_mm

    def gains(self, values, thr, rows, depth):
        return _kernels.gaussian_gains(values, thr, self.flat[rows], float(self.min_leaf))

    def leaf_value(self, rows, ctx):
        J = self.local.shape[1]
        return np.array([mean_shift_mode(self.local[rows, j], self.bandwidth_mm) for j in range(J)])


def mean_shift_mode(votes, bandwidth_mm=DEFAULT_BANDWIDTH_MM):
    """Density mode of 3D votes under a Gaussian kernel, started at the
    coordinate-wise median and iterated until the step is below 0.01 mm."""
    votes = np.ascontiguousarray(votes, dtype=float).reshape(-1, 3)
    if len(votes) == 0:
        raise ValueError("mean shift needs at least one vote")
    if not bandwidth_mm > 0:
        raise ValueError("bandwidth must be positive")
    return _kernels.mean_shift(votes, float(bandwidth_mm), MEAN_SHIFT_TOL_MM, MEAN_SHIFT_MAX_ITER)


def aggregate_joint(votes, bandwidth_mm=DEFAULT_BANDWIDTH_MM):
    """Fuse per-point joint position votes ``p_i + o_ik`` into one estimate."""
    return mean_shift_mode(votes, bandwidth_mm)


def _bootstrap(rng, m, fraction):
    if fraction >= 1.0:
        return np.arange(m)
    n = max(1, int(round(fraction * m)))
    return np.sort(rng.integers(0, m, size=n))


def train_fcrf(samples: Samples, clouds, params: ForestParams = ForestParams(), *,
               kind=FeatureKind.NORMAL_DIFF, stage="stage", axis_constraint=None,
               record=False):
    """Train one stage forest.  ``clouds`` holds the surfaces that
    ``samples.cloud_ids`` refer to (clouds with normals, or analytic point sets)."""
    if isinstance(samples, (list, tuple)):
        samples = Samples.from_list(samples)
    if len(samples) == 0:
        raise EmptyTrainingSet("no training samples")
    kind = FeatureKind(kind)
    source = make_source(clouds, kind)
    pts = source.positions(samples.cloud_ids, samples.point_ids)
    rots = np.ascontiguousarray(samples.rotations, dtype=float)
    fids = np.ascontiguousarray(samples.cloud_ids, dtype=np.int64)
    local = np.einsum("mji,mkj->mki", rots, samples.targets)
    trees, builders = [], []
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)
    for t in range(params.n_trees):
        rng = np.random.default_rng(seeds[t])
        rows = _bootstrap(rng, len(samples), params.bagging)
        b = GaussianTreeBuilder(source, kind, fids, pts, rots, local_targets=local,
                                bandwidth_mm=params.bandwidth_mm, max_depth=params.max_depth,
                                n_features=params.n_features, n_thresholds=params.n_thresholds,
                                min_leaf=params.min_leaf, offset_range_mm=params.offset_range_mm,
                                rng=rng, record=record)
        trees.append(b.build(rows))
        builders.append(b)
        log.debug("%s: tree %d has %d nodes", stage, t, trees[-1].n_nodes)
    model = FcrfModel(trees, samples.targets.shape[1], stage, kind, axis_constraint,
                      params.max_depth)
    if record:
        return model, builders
    return model


def predict_local(model, source, fids, pts, rots):
    """Tree-averaged local-frame offsets ``(m, n_joints, 3)``."""
    acc = np.zeros((len(fids), model.n_joints, 3))
    for tree in model.trees:
        acc += tree.values[source.route(tree, model.kind, fids, pts, rots)]
    acc /= len(model.trees)
    if model.axis_constraint is not None:
        keep = np.zeros(3)
        keep[model.axis_constraint] = 1.0
        acc *= keep
    return acc


def predict_offsets_batch(model, source, fids, pts, rots):
    """Camera-frame offsets ``(m, n_joints, 3)``; rotations are frame poses."""
    fids = np.ascontiguousarray(fids, dtype=np.int64)
    pts = np.ascontiguousarray(pts, dtype=float)
    rots = np.ascontiguousarray(rots, dtype=float)
    local = predict_local(model, source, fids, pts, rots)
    return np.einsum("mij,mkj->mki", rots, local)


def predict_offsets(model, cloud, index, frame: LocalFrame):
    """Offsets from point ``index`` to the stage joints, in camera coordinates."""
    source = make_source([cloud], model.kind)
    return predict_offsets_batch(model, source, np.zeros(1, np.int64),
                                 cloud.points[[index]], frame.pose[None])[0]
