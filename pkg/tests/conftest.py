import numpy as np
import pytest

from handforest.cloud import CameraIntrinsics, backproject
from handforest.geometry import RigidTransform, rot_z
from handforest.synth import SkeletonParams, render_depth

CAMERA = CameraIntrinsics.default()


def hand_params(yaw=0.0, pitch=0.0, roll=0.0, center=(0.0, 0.0, 650.0), angles=None):
    return SkeletonParams.from_view(np.radians(yaw), np.radians(pitch), np.radians(roll),
                                    center, angles)


def rendered_cloud(params, camera=CAMERA, analytic=True):
    """Back-projected rendering; ``analytic`` attaches exact normals signed along the ray."""
    frame, pose, nrm = render_depth(params, camera)
    cloud = backproject(frame)
    if analytic:
        cloud = cloud.with_normals(-nrm[cloud.pixels[:, 0], cloud.pixels[:, 1]])
    return cloud, pose


def rolled(params, angle):
    """The same hand rotated about the camera's optical axis."""
    T = RigidTransform(rot_z(angle), np.zeros(3))
    return SkeletonParams(T.compose(params.global_pose), params.finger_angles, params.scale)


@pytest.fixture(scope="session")
def camera():
    return CAMERA


@pytest.fixture(scope="session")
def open_hand():
    return rendered_cloud(hand_params())


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
