"""Binary forest container.

Layout (little-endian): magic ``HCRF``, u16 version, u16-length-prefixed
UTF-8 stage name, u8 feature kind, u32 tree count, u32 joint count, then per
tree a pre-order node stream.  An internal node is tag 0, a kind byte, six
f32 offsets and an f32 threshold.  A leaf is tag 1 followed by
``n_joints * 3`` f32 values, or two f32 angles ``(theta, phi)`` for the
normal forest (stored with zero joints).
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .features import FeatureKind
from .forest import FcrfModel, Tree

MAGIC = b"HCRF"
VERSION = 1
NORMAL_STAGE = "normals"
INTERNAL, LEAF = 0, 1


class ModelFormatError(ValueError):
    """A model file is truncated, has the wrong magic, or is internally inconsistent."""


def _write_tree(out, tree: Tree, kind: int, leaf_size: int):
    for node in range(tree.n_nodes):
        if tree.leaf[node] < 0:
            out.write(struct.pack("<BB", INTERNAL, kind))
            out.write(np.asarray(tree.offsets[node], dtype="<f4").tobytes())
            out.write(struct.pack("<f", tree.thresholds[node]))
        else:
            vals = np.asarray(tree.values[tree.leaf[node]], dtype="<f4").ravel()
            if vals.size != leaf_size:
                raise ModelFormatError("leaf size does not match the joint count")
            out.write(struct.pack("<B", LEAF))
            out.write(vals.tobytes())


def _dump(stage, kind, n_joints, trees, leaf_size):
    out = io.BytesIO()
    name = stage.encode("utf-8")
    out.write(MAGIC)
    out.write(struct.pack("<HH", VERSION, len(name)))
    out.write(name)
    out.write(struct.pack("<BII", int(kind), len(trees), n_joints))
    for tree in trees:
        _write_tree(out, tree, int(kind), leaf_size)
    return out.getvalue()


def model_bytes(model) -> bytes:
    from .normals import NormalForest

    if isinstance(model, NormalForest):
        return _dump(NORMAL_STAGE, FeatureKind.DEPTH_DIFF, 0, model.trees, 2)
    return _dump(model.stage, model.kind, model.n_joints, model.trees, 3 * model.n_joints)


def save_model(model, path):
    Path(path).write_bytes(model_bytes(model))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ModelFormatError("truncated model file")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def floats(self, n):
        if self.pos + 4 * n > len(self.data):
            raise ModelFormatError("truncated model file")
        a = np.frombuffer(self.data, dtype="<f4", count=n, offset=self.pos).astype(float)
        self.pos += 4 * n
        return a


def _read_tree(r: _Reader, kind, leaf_size, leaf_shape):
    off, thr, right, leaf, values = [], [], [], [], []
    stack = []  # internal nodes still waiting for their right child
    while True:
        node = len(leaf)
        (tag,) = r.take("<B")
        if tag == INTERNAL:
            (k,) = r.take("<B")
            if k != kind:
                raise ModelFormatError("node feature kind differs from the forest kind")
            off.append(r.floats(6))
            thr.append(r.floats(1)[0])
            right.append(-1)
            leaf.append(-1)
            stack.append(node)
            continue
        if tag != LEAF:
            raise ModelFormatError(f"unknown node tag {tag}")
        off.append(np.zeros(6))
        thr.append(0.0)
        right.append(-1)
        leaf.append(len(values))
        values.append(r.floats(leaf_size).reshape(leaf_shape))
        # a leaf completes the left subtree of the innermost open node
        while stack and right[stack[-1]] >= 0:
            stack.pop()
        if not stack:
            break
        right[stack[-1]] = len(leaf)
    return Tree(np.array(off).reshape(-1, 6), np.array(thr), np.array(right, dtype=np.int64),
                np.array(leaf, dtype=np.int64), np.array(values))


def load_model(path_or_bytes):
    """Read a model file; returns an :class:`FcrfModel` or a ``NormalForest``."""
    from .normals import NormalForest

    data = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    r = _Reader(data)
    if r.take("<4s")[0] != MAGIC:
        raise ModelFormatError("bad magic")
    version, name_len = r.take("<HH")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    stage = bytes(r.take(f"<{name_len}s")[0]).decode("utf-8")
    kind, n_trees, n_joints = r.take("<BII")
    try:
        kind = FeatureKind(kind)
    except ValueError:
        raise ModelFormatError(f"unknown feature kind {kind}") from None
    normal = n_joints == 0
    leaf_size, leaf_shape = (2, (2,)) if normal else (3 * n_joints, (n_joints, 3))
    trees = [_read_tree(r, int(kind), leaf_size, leaf_shape) for _ in range(n_trees)]
    if r.pos != len(data):
        raise ModelFormatError("trailing bytes after the last tree")
    if normal:
        return NormalForest(trees)
    return FcrfModel(trees, n_joints, stage, kind)
