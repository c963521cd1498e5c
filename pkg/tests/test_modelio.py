import struct

import numpy as np
import pytest

from handforest.features import FeatureKind, make_source
from handforest.forest import FcrfModel, ForestParams, Samples, Tree, predict_offsets_batch, train_fcrf
from handforest.geometry import random_rotation
from handforest.modelio import ModelFormatError, load_model, model_bytes, save_model
from handforest.normals import NormalForest, NormalForestParams, predict_angles, train_normal_forest

from conftest import hand_params, rendered_cloud

PARAMS = ForestParams(n_trees=2, max_depth=5, n_features=15, n_thresholds=6, min_leaf=3,
                      offset_range_mm=40, seed=2)


def stump(kind=FeatureKind.NORMAL_DIFF):
    return Tree(offsets=np.array([[1, 2, 3, 4, 5, 6], [0] * 6, [0] * 6], dtype=float),
                thresholds=np.array([0.5, 0, 0]), right=np.array([2, -1, -1]),
                leaf=np.array([-1, 0, 1]),
                values=np.array([[[1.0, 2.0, 3.0]], [[-1.0, -2.0, -3.0]]]))


@pytest.fixture(scope="module")
def hand():
    cloud, _ = rendered_cloud(hand_params(yaw=-10, pitch=15))
    return cloud


@pytest.fixture(scope="module")
def fcrf(hand):
    rng = np.random.default_rng(0)
    ids = hand.inner_ids()[::30]
    rots = np.array([random_rotation(rng) for _ in ids])
    samples = Samples(np.zeros(len(ids), np.int64), ids, rots, rng.normal(size=(len(ids), 3, 3)) * 20)
    return train_fcrf(samples, [hand], PARAMS, stage="pip_index")


class TestLayout:
    def test_stump_bytes(self):
        m = FcrfModel([stump()], 1, "ab", FeatureKind.NORMAL_DIFF)
        k = int(FeatureKind.NORMAL_DIFF)
        expected = (b"HCRF" + struct.pack("<HH", 1, 2) + b"ab" + struct.pack("<BII", k, 1, 1)
                    + struct.pack("<BB", 0, k) + struct.pack("<7f", 1, 2, 3, 4, 5, 6, 0.5)
                    + struct.pack("<B3f", 1, 1, 2, 3) + struct.pack("<B3f", 1, -1, -2, -3))
        assert model_bytes(m) == expected

    def test_normal_forest_header(self):
        t = Tree(np.zeros((1, 6)), np.zeros(1), np.array([-1]), np.array([0]),
                 np.array([[0.25, -1.5]]))
        raw = model_bytes(NormalForest([t]))
        k = int(FeatureKind.DEPTH_DIFF)
        assert raw == (b"HCRF" + struct.pack("<HH", 1, 7) + b"normals"
                       + struct.pack("<BII", k, 1, 0) + struct.pack("<B2f", 1, 0.25, -1.5))


class TestRoundTrip:
    def test_stump(self):
        m = FcrfModel([stump()], 1, "ab", FeatureKind.NORMAL_DIFF)
        back = load_model(model_bytes(m))
        assert back.stage == "ab" and back.n_joints == 1 and back.kind == FeatureKind.NORMAL_DIFF
        assert back.trees[0].same_structure(stump())
        np.testing.assert_array_equal(back.trees[0].values, stump().values)

    def test_trained_model_predicts_identically(self, fcrf, hand, tmp_path):
        save_model(fcrf, tmp_path / "m.hcrf")
        back = load_model(tmp_path / "m.hcrf")
        src = make_source([hand], fcrf.kind)
        rng = np.random.default_rng(1)
        ids = rng.choice(len(hand), 1000)
        rots = np.array([random_rotation(rng) for _ in ids])
        fids = np.zeros(len(ids), np.int64)
        a = predict_offsets_batch(fcrf, src, fids, hand.points[ids], rots)
        b = predict_offsets_batch(back, src, fids, hand.points[ids], rots)
        np.testing.assert_array_equal(a, b)
        assert model_bytes(back) == model_bytes(fcrf)

    def test_normal_forest(self, hand, tmp_path):
        f = train_normal_forest([(hand, hand.normals)],
                                NormalForestParams(max_depth=6, n_features=20, seed=3))
        save_model(f, tmp_path / "n.hcrf")
        back = load_model(tmp_path / "n.hcrf")
        assert isinstance(back, NormalForest)
        ids = hand.inner_ids()
        for x, y in zip(predict_angles(f, hand, ids), predict_angles(back, hand, ids)):
            np.testing.assert_array_equal(x, y)

    def test_retraining_is_byte_identical(self, fcrf, hand):
        rng = np.random.default_rng(0)
        ids = hand.inner_ids()[::30]
        rots = np.array([random_rotation(rng) for _ in ids])
        samples = Samples(np.zeros(len(ids), np.int64), ids, rots,
                          rng.normal(size=(len(ids), 3, 3)) * 20)
        again = train_fcrf(samples, [hand], PARAMS, stage="pip_index")
        assert model_bytes(again) == model_bytes(fcrf)


class TestErrors:
    def raw(self):
        return model_bytes(FcrfModel([stump()], 1, "ab", FeatureKind.NORMAL_DIFF))

    def test_bad_magic(self):
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(b"XXXX" + self.raw()[4:])

    def test_version(self):
        r = self.raw()
        with pytest.raises(ModelFormatError, match="version"):
            load_model(r[:4] + struct.pack("<H", 2) + r[6:])

    @pytest.mark.parametrize("cut", [3, 10, 20, 40, -1])
    def test_truncated(self, cut):
        with pytest.raises(ModelFormatError):
            load_model(self.raw()[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(ModelFormatError, match="trailing"):
            load_model(self.raw() + b"\0")

    def test_unknown_tag(self):
        r = bytearray(self.raw())
        r[19] = 7  # first node tag
        with pytest.raises(ModelFormatError, match="tag"):
            load_model(bytes(r))

    def test_node_kind_mismatch(self):
        r = bytearray(self.raw())
        r[20] = int(FeatureKind.DEPTH_DIFF)
        with pytest.raises(ModelFormatError, match="kind"):
            load_model(bytes(r))

    def test_unknown_feature_kind(self):
        r = bytearray(self.raw())
        r[10] = 99
        with pytest.raises(ModelFormatError, match="kind"):
            load_model(bytes(r))

    def test_leaf_size_checked_on_write(self):
        with pytest.raises(ModelFormatError):
            model_bytes(FcrfModel([stump()], 2, "ab", FeatureKind.NORMAL_DIFF))
