"""Rigid motion segmentation and rigid-body scene flow from flow, expansion and depth."""
from .errors import (BehindCameraError, CheiralityError, DegenerateTranslationError, EstimationError,
                     GeometryError, InsufficientDataError, RigidKitError, ZeroParallaxError)
from .estimators import EgomotionEstimator, RigidMotionSegmenter, RigidSceneFlow
from .geometry import CameraIntrinsics, RigidTransform

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError", "CameraIntrinsics", "CheiralityError", "DegenerateTranslationError",
    "EgomotionEstimator", "EstimationError", "GeometryError", "InsufficientDataError",
    "RigidKitError", "RigidMotionSegmenter", "RigidSceneFlow", "RigidTransform", "ZeroParallaxError",
]
