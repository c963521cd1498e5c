"""Hand joint estimation from single depth frames with frame-conditioned
regression forests over surface normals."""

from .cloud import CameraIntrinsics, Cloud, DepthFrame, backproject
from .geometry import LocalFrame, RigidTransform
from .modelio import load_model, save_model
from .normals import NormalForest, NormalForestParams, predict_normals, train_normal_forest
from .pipeline import ModelBundle, PipelineConfig, PoseEstimate, estimate_pose, train_bundle
from .skeleton import JOINT_NAMES, N_JOINTS, HandPose

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "Cloud", "DepthFrame", "backproject", "LocalFrame", "RigidTransform",
    "load_model", "save_model", "NormalForest", "NormalForestParams", "predict_normals",
    "train_normal_forest", "ModelBundle", "PipelineConfig", "PoseEstimate", "estimate_pose",
    "train_bundle", "JOINT_NAMES", "N_JOINTS", "HandPose",
]
