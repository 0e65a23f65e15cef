"""Generative hand tracking with PSO and an edge-offloading runtime."""

from .config import Settings
from .kinematics import CameraIntrinsics, DepthMap, HandGeometry
from .objective import ObjectiveConfig, evaluate, evaluate_batch
from .pso import PsoConfig, optimize_frame

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "DepthMap",
    "HandGeometry",
    "ObjectiveConfig",
    "PsoConfig",
    "Settings",
    "evaluate",
    "evaluate_batch",
    "optimize_frame",
]
