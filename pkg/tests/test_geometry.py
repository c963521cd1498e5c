import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handforest.geometry import (DegenerateConfiguration, DegenerateFrame, LocalFrame,
                                 RigidTransform, frame_from_axes, from_local, is_rotation,
                                 kabsch_align, random_rotation, rot_z, spherical_from_unit,
                                 to_local, unit_from_spherical)

from oracles import orthonormal_right_handed, rotation_from_quaternion

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
quat = st.tuples(*[st.floats(-1, 1) for _ in range(4)]).filter(
    lambda q: np.linalg.norm(q) > 1e-3).map(np.array)


class TestFrameFromAxes:
    def test_identity(self):
        f = frame_from_axes([1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, 0])
        np.testing.assert_array_equal(f.pose, np.eye(3))
        np.testing.assert_array_equal(f.origin, np.zeros(3))

    def test_normalizes_scaled_axes(self):
        f = frame_from_axes([2, 0, 0], [0, 3, 0], [0, 0, 5])
        np.testing.assert_allclose(f.pose, np.eye(3), atol=1e-15)

    def test_parallel_axes_rejected(self):
        with pytest.raises(DegenerateFrame):
            frame_from_axes([1, 0, 0], [1, 1e-9, 0], [0, 0, 1])

    def test_zero_axis_rejected(self):
        with pytest.raises(DegenerateFrame):
            frame_from_axes([0, 0, 0], [0, 1, 0], [0, 0, 1])

    def test_z_is_kept_exactly(self):
        z = np.array([0.3, -0.4, 0.866])
        f = frame_from_axes([1, 0, 0], [0, 1, 0.2], z)
        np.testing.assert_allclose(f.z, z / np.linalg.norm(z), atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(quat, st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
    def test_perturbed_axes_give_valid_frames(self, q, e1, e2):
        R = rotation_from_quaternion(q)
        f = frame_from_axes(R[:, 0] + e1 * R[:, 1], R[:, 1] + e2 * R[:, 2], R[:, 2])
        assert f.is_valid()
        assert orthonormal_right_handed(f.pose, 1e-9)


class TestLocalOffsets:
    def test_identity_frame(self):
        f = LocalFrame(np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(to_local(f, [1, 2, 3]), [1, 2, 3])

    def test_quarter_turn_about_z(self):
        f = LocalFrame(rot_z(np.pi / 2), np.zeros(3))
        np.testing.assert_allclose(to_local(f, [1, 0, 0]), [0, -1, 0], atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(quat, vec3)
    def test_roundtrip(self, q, o):
        f = LocalFrame(rotation_from_quaternion(q), np.zeros(3))
        np.testing.assert_allclose(from_local(f, to_local(f, o)), o, atol=1e-9)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        f = LocalFrame(random_rotation(rng), rng.normal(size=3))
        o = rng.normal(size=(10, 3))
        np.testing.assert_allclose(to_local(f, o), np.array([f.pose.T @ v for v in o]),
                                   atol=1e-14)


class TestSpherical:
    @pytest.mark.parametrize("n, expected", [
        ((0, 0, 1), (0.0, 0.0)),
        ((1, 0, 0), (np.pi / 2, 0.0)),
        ((0, 1, 0), (np.pi / 2, np.pi / 2)),
        ((0, 0, -1), (np.pi, 0.0)),
        ((-1, 0, 0), (np.pi / 2, np.pi)),
    ])
    def test_examples(self, n, expected):
        np.testing.assert_allclose(spherical_from_unit(np.array(n, float)), expected, atol=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
    def test_roundtrip_away_from_poles(self, x, y, z):
        n = np.array([x, y, z])
        if np.linalg.norm(n) < 1e-3:
            return
        n /= np.linalg.norm(n)
        if abs(n[2]) >= 1 - 1e-6:
            return
        theta, phi = spherical_from_unit(n)
        assert 0 <= theta <= np.pi
        assert -np.pi < phi <= np.pi
        np.testing.assert_allclose(unit_from_spherical(theta, phi), n, atol=1e-9)

    def test_rowwise(self):
        rng = np.random.default_rng(0)
        n = rng.normal(size=(50, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        th, ph = spherical_from_unit(n)
        np.testing.assert_allclose(unit_from_spherical(th, ph), n, atol=1e-12)


class TestKabsch:
    def test_identity(self):
        rng = np.random.default_rng(1)
        src = rng.normal(size=(6, 3)) * 50
        T = kabsch_align(src, src)
        np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(T.translation, 0, atol=1e-10)

    def test_recovers_rigid_transform(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            R = random_rotation(rng)
            t = rng.uniform(-500, 500, size=3)
            src = rng.normal(size=(6, 3)) * 40
            T = kabsch_align(src, src @ R.T + t)
            np.testing.assert_allclose(T.rotation, R, atol=1e-9)
            np.testing.assert_allclose(T.translation, t, atol=1e-9)

    def test_collinear_rejected(self):
        src = np.outer(np.arange(5.0), [1, 2, 3])
        with pytest.raises(DegenerateConfiguration):
            kabsch_align(src, src)

    def test_too_few_points(self):
        with pytest.raises(DegenerateConfiguration):
            kabsch_align(np.eye(3)[:2], np.eye(3)[:2])

    def test_reflection_free(self):
        # mirror images make the unconstrained SVD solution a reflection
        rng = np.random.default_rng(4)
        src = rng.normal(size=(8, 3))
        dst = src * np.array([1, 1, -1])
        T = kabsch_align(src, dst)
        assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-12)
        assert is_rotation(T.rotation)


class TestRigidTransform:
    def test_inverse_and_compose(self):
        rng = np.random.default_rng(5)
        A = RigidTransform(random_rotation(rng), rng.normal(size=3))
        B = RigidTransform(random_rotation(rng), rng.normal(size=3))
        p = rng.normal(size=(4, 3))
        np.testing.assert_allclose(A.inverse().apply(A.apply(p)), p, atol=1e-12)
        np.testing.assert_allclose(A.compose(B).apply(p), A.apply(B.apply(p)), atol=1e-12)

    def test_frame_transformed(self):
        rng = np.random.default_rng(6)
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        f = LocalFrame(random_rotation(rng), rng.normal(size=3))
        g = f.transformed(T)
        np.testing.assert_allclose(g.pose, T.rotation @ f.pose, atol=1e-14)
        np.testing.assert_allclose(g.origin, T.apply(f.origin), atol=1e-14)
        assert g.is_valid()
