"""Input checks for dense fields, in the spirit of ``sklearn.utils.validation``."""
import numpy as np
from sklearn.utils.validation import check_array

from .geometry import CameraIntrinsics


def check_flow(flow, name="flow"):
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"{name} must have shape (H, W, 2), got {flow.shape}")
    if min(flow.shape[:2]) < 1:
        raise ValueError(f"{name} is empty")
    return flow


def check_raster(a, shape, name, allow_nan=True):
    a = check_array(a, dtype=np.float64, ensure_all_finite="allow-nan" if allow_nan else True,
                    ensure_2d=True, input_name=name)
    if a.shape != tuple(shape):
        raise ValueError(f"{name} has shape {a.shape}, expected {tuple(shape)}")
    return a


def check_labels(labels, shape):
    labels = np.asarray(labels)
    if labels.shape != tuple(shape):
        raise ValueError(f"labels have shape {labels.shape}, expected {tuple(shape)}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
    return labels.astype(np.int32)


def check_intrinsics(K):
    if isinstance(K, CameraIntrinsics):
        return K
    if isinstance(K, dict):
        return CameraIntrinsics.from_dict(K)
    return CameraIntrinsics.from_matrix(K)


def check_dense_inputs(flow, expansion=None, depth_prior=None, confidence=None):
    """Validate a set of per-pixel inputs against the flow's dimensions.

    A missing confidence map defaults to 1 wherever the flow is finite.
    """
    flow = check_flow(flow)
    shape = flow.shape[:2]
    expansion = None if expansion is None else check_raster(expansion, shape, "expansion")
    depth_prior = None if depth_prior is None else check_raster(depth_prior, shape, "depth_prior")
    if confidence is None:
        confidence = np.all(np.isfinite(flow), axis=-1).astype(np.float64)
    else:
        confidence = check_raster(confidence, shape, "confidence", allow_nan=False)
    return flow, expansion, depth_prior, confidence
