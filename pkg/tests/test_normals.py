import numpy as np
import pytest

from handforest.circstats import circular_mean
from handforest.cloud import CameraIntrinsics, DepthFrame, backproject, deep_interior_mask
from handforest.features import FeatureKind, ImageSurfaces
from handforest.forest import EmptyTrainingSet
from handforest.geometry import spherical_from_unit
from handforest.normals import (DegenerateNeighborhood, InsufficientNeighbors, NormalForestParams,
                                angular_error_deg, edge_normal, edge_normals, estimate_normals_pca,
                                pca_normal, pca_normals, predict_angles, predict_normals,
                                train_normal_forest)

from conftest import CAMERA, hand_params, rendered_cloud
from oracles import plane_depth, sphere_depth, tilted_plane_depth

SMALL_FOREST = NormalForestParams(max_depth=6, n_features=30, n_thresholds=10,
                                  points_per_frame=100000, seed=1)


def cloud_of(depth, cam=CAMERA):
    return backproject(DepthFrame(cam, depth))


def tilted_plane(normal=(-0.3, 0.2, 1.0)):
    n = np.asarray(normal) / np.linalg.norm(normal)
    c = cloud_of(tilted_plane_depth(CAMERA, n, 500 * n[2], (60, 180), (90, 230)))
    return c, n


def roof():
    """Two planes meeting along a vertical crease, each tilted 35 degrees."""
    a = np.radians(35)
    left = np.array([-np.sin(a), 0, np.cos(a)])
    right = np.array([np.sin(a), 0, np.cos(a)])
    dl = tilted_plane_depth(CAMERA, left, 500 * left[2], (40, 200), (60, 161))
    dr = tilted_plane_depth(CAMERA, right, 500 * right[2], (40, 200), (160, 260))
    d = dl.copy()
    d[:, 160:] = dr[:, 160:]
    c = cloud_of(d)
    gt = np.where((c.pixels[:, 1] < 160)[:, None], left, right)
    return c, gt


class TestPcaNormal:
    def test_plane(self):
        c = cloud_of(plane_depth(CAMERA, 500, (100, 140), (140, 180)))
        np.testing.assert_allclose(pca_normal(c, c.index[120, 160]), [0, 0, 1], atol=1e-12)

    def test_tilted_plane(self):
        c, n = tilted_plane()
        np.testing.assert_allclose(pca_normal(c, c.index[120, 160]), n, atol=1e-9)

    def test_sphere(self):
        d, outward = sphere_depth(CAMERA, (0, 0, 400), 60)
        c = cloud_of(d)
        ids = c.inner_ids()[::25]
        # the ray-signed normal on the visible cap points into the sphere
        ref = -outward[c.pixels[ids, 0], c.pixels[ids, 1]]
        est = np.array([pca_normal(c, i) for i in ids])
        assert np.max(angular_error_deg(est, ref)) < 3.0

    def test_two_points(self):
        d = np.zeros((CAMERA.height, CAMERA.width))
        d[120, 160:162] = 500
        with pytest.raises(InsufficientNeighbors):
            pca_normal(cloud_of(d), 0)

    def test_collinear(self):
        d = np.zeros((CAMERA.height, CAMERA.width))
        d[120, 150:171] = 500
        c = cloud_of(d)
        with pytest.raises(DegenerateNeighborhood):
            pca_normal(c, c.index[120, 160])

    def test_batch_matches_single(self):
        d, _ = sphere_depth(CAMERA, (10, -5, 450), 50)
        c = cloud_of(d)
        ids = c.inner_ids()[::40]
        n, status = pca_normals(c, ids)
        assert not status.any()
        np.testing.assert_allclose(n, [pca_normal(c, i) for i in ids], atol=1e-9)


class TestEdgeNormal:
    def test_vertical_silhouettes(self):
        c = cloud_of(plane_depth(CAMERA, 500, (60, 180), (110, 210)))
        np.testing.assert_allclose(edge_normal(c, c.index[120, 110]), [-1, 0, 0], atol=1e-9)
        np.testing.assert_allclose(edge_normal(c, c.index[120, 209]), [1, 0, 0], atol=1e-9)

    def test_disc(self):
        d = plane_depth(CAMERA, 0.0)
        v, u = np.mgrid[:CAMERA.height, :CAMERA.width]
        x, y = (u - CAMERA.cx) * 500 / CAMERA.fx, (v - CAMERA.cy) * 500 / CAMERA.fy
        d[x * x + y * y <= 40 ** 2] = 500
        c = cloud_of(d)
        ids = c.edge_ids()
        n, status = edge_normals(c, ids)
        assert not status.any()
        radial = c.points[ids] * [1, 1, 0]
        radial /= np.linalg.norm(radial, axis=1, keepdims=True)
        assert np.max(angular_error_deg(n, radial)) < 5.0

    def test_isolated_point(self):
        d = plane_depth(CAMERA, 0.0)
        d[120, 160] = 500
        with pytest.raises(InsufficientNeighbors):
            edge_normal(cloud_of(d), 0)

    def test_failures_fall_back_to_ray(self):
        d = plane_depth(CAMERA, 0.0)
        d[50, 60] = 500
        c = cloud_of(d)
        n, status = edge_normals(c)
        assert status[0] != 0
        np.testing.assert_allclose(n[0], c.points[0] / np.linalg.norm(c.points[0]))


class TestPcaOnHands:
    def test_deep_interior_accuracy(self):
        errs = []
        for yaw, pitch in [(0, 0), (30, -20), (-40, 25)]:
            cloud, _ = rendered_cloud(hand_params(yaw=yaw, pitch=pitch))
            est = estimate_normals_pca(cloud)
            deep = np.flatnonzero(deep_interior_mask(cloud, 2))
            errs.append(angular_error_deg(est.normals[deep], cloud.normals[deep]))
        assert np.mean(np.concatenate(errs)) <= 10.0

    def test_unit_and_ray_signed(self, open_hand):
        est = estimate_normals_pca(open_hand[0])
        np.testing.assert_allclose(np.linalg.norm(est.normals, axis=1), 1, atol=1e-9)
        inner = est.inner_ids()
        assert np.all(np.sum(est.normals[inner] * est.points[inner], axis=1) > 0)
        # silhouette normals stay in the image plane
        np.testing.assert_allclose(est.normals[est.edge_ids(), 2], 0, atol=1e-12)


class TestNormalForest:
    def test_constant_target_leaves(self):
        c, n = tilted_plane()
        f = train_normal_forest([(c, np.tile(n, (len(c), 1)))], SMALL_FOREST)
        theta, phi = spherical_from_unit(n)
        for tree in f.trees:
            np.testing.assert_allclose(tree.values[:, 0], theta, atol=1e-3)
            np.testing.assert_allclose(tree.values[:, 1], phi, atol=1e-3)
        est = predict_normals(f, c)
        inner = c.inner_ids()
        assert np.max(angular_error_deg(est.normals[inner], n)) < 5.0

    def test_learns_two_faces(self):
        c, gt = roof()
        # both faces share the polar angle, so only azimuth layers can separate them
        params = NormalForestParams(max_depth=6, layer_split=2, n_features=30, n_thresholds=10,
                                    points_per_frame=100000, seed=1)
        f = train_normal_forest([(c, gt)], params)
        est = predict_normals(f, c)
        # away from the crease the local depth pattern identifies the face
        inner = c.inner_ids()
        away = inner[np.abs(c.pixels[inner, 1] - 160) > 12]
        assert np.median(angular_error_deg(est.normals[away], gt[away])) < 5.0

    def test_ignores_unlabeled_rows(self):
        c, n = tilted_plane()
        gt = np.tile(n, (len(c), 1))
        gt[::2] = np.nan
        f = train_normal_forest([(c, gt)], SMALL_FOREST)
        assert np.all(np.isfinite(f.trees[0].values))

    def test_empty_training_set(self):
        c, _ = tilted_plane()
        with pytest.raises(EmptyTrainingSet):
            train_normal_forest([(c, np.full((len(c), 3), np.nan))], SMALL_FOREST)

    def test_output_unit_and_ray_signed(self, open_hand):
        cloud, _ = open_hand
        f = train_normal_forest([(cloud, cloud.normals)], SMALL_FOREST)
        est = predict_normals(f, cloud)
        np.testing.assert_allclose(np.linalg.norm(est.normals, axis=1), 1, atol=1e-9)
        inner = est.inner_ids()
        assert np.all(np.sum(est.normals[inner] * est.points[inner], axis=1) > 0)

    def test_deterministic(self):
        c, gt = roof()
        a = train_normal_forest([(c, gt)], SMALL_FOREST)
        b = train_normal_forest([(c, gt)], SMALL_FOREST)
        assert a.trees[0].same_structure(b.trees[0])
        np.testing.assert_array_equal(a.trees[0].values, b.trees[0].values)

    def test_polar_angle_inherited_below_layer_split(self, open_hand):
        cloud, _ = open_hand
        split = 2
        params = NormalForestParams(max_depth=5, layer_split=split, n_features=20,
                                    n_thresholds=8, points_per_frame=100000, seed=3)
        tree = train_normal_forest([(cloud, cloud.normals)], params).trees[0]
        ids = cloud.inner_ids()
        n = cloud.normals[ids] * np.sign(np.sum(cloud.normals[ids] * cloud.points[ids], 1))[:, None]
        theta, phi = spherical_from_unit(n)
        # walk every training point down, noting the node it occupies at depth ``split``
        src = ImageSurfaces([cloud], need_normals=False)
        fids = np.zeros(len(ids), np.int64)
        pts = cloud.points[ids]
        rots = np.tile(np.eye(3), (len(ids), 1, 1))
        node = np.zeros(len(ids), np.int64)
        anchor = np.full(len(ids), -1)
        for d in range(params.max_depth + 1):
            if d == split:
                anchor = np.where(tree.leaf[node] < 0, node, -1)
            inner = tree.leaf[node] < 0
            if not inner.any():
                break
            k = np.flatnonzero(inner)
            v = src.values_paired(FeatureKind.DEPTH_DIFF, fids[k], pts[k], rots[k],
                                  tree.offsets[node[k]])
            node[k] = np.where(v < tree.thresholds[node[k]], node[k] + 1, tree.right[node[k]])
        leaf = tree.leaf[node]
        deep = anchor >= 0
        assert deep.any()
        for a in np.unique(anchor[deep]):
            sel = anchor == a
            expected = circular_mean(theta[sel])
            for lf in np.unique(leaf[sel]):
                # leaves are stored in single precision
                assert tree.values[lf, 0] == pytest.approx(expected, abs=1e-6)
        for lf in np.unique(leaf[~deep]):
            sel = leaf == lf
            assert tree.values[lf, 0] == pytest.approx(circular_mean(theta[sel]), abs=1e-6)
            assert tree.values[lf, 1] == pytest.approx(circular_mean(phi[sel]), abs=1e-6)

    def test_predict_angles_shape(self, open_hand):
        cloud, _ = open_hand
        f = train_normal_forest([(cloud, cloud.normals)], SMALL_FOREST)
        th, ph = predict_angles(f, cloud, cloud.inner_ids()[:10])
        assert th.shape == ph.shape == (10,)
