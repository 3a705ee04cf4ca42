"""scikit-learn style wrappers around the egomotion, segmentation and rigid-fit stages.

The "samples" here are dense per-pixel fields, so ``X`` is an optical flow
array of shape (H, W, 2) and the remaining fields are keyword arguments.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .costmaps import MotionContext, compute_cost_maps
from .pipeline import RansacParams, estimate_ego, run_segmentation
from .rigidfit import PARALLAX_MIN, assemble_scene_flow, fit_all_segments, refine_pnp_lm
from .segment import ThresholdConfig
from .validation import check_dense_inputs, check_intrinsics, check_labels, check_raster


def _seed(random_state):
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    raise ValueError("random_state must be an int or None")


class EgomotionEstimator(BaseEstimator):
    """Camera motion from dense flow via five-point RANSAC.

    After ``fit``: ``transform_`` (camera motion, ``P0 = R P1 + T``),
    ``degenerate_``, ``estimate_``.
    """

    def __init__(self, K0=None, K1=None, iters=1000, threshold=0.01, confidence=0.999,
                 max_correspondences=2000, random_state=0):
        self.K0 = K0
        self.K1 = K1
        self.iters = iters
        self.threshold = threshold
        self.confidence = confidence
        self.max_correspondences = max_correspondences
        self.random_state = random_state

    def _intrinsics(self):
        if self.K0 is None:
            raise ValueError("K0 is required")
        K0 = check_intrinsics(self.K0)
        return K0, (K0 if self.K1 is None else check_intrinsics(self.K1))

    def fit(self, X, y=None, confidence=None):
        flow, _, _, conf = check_dense_inputs(X, confidence=confidence)
        K0, K1 = self._intrinsics()
        rp = RansacParams(self.iters, self.threshold, self.confidence, self.max_correspondences)
        self.estimate_ = estimate_ego(flow, conf, K0, K1, _seed(self.random_state), rp)
        self.transform_ = self.estimate_.transform
        self.degenerate_ = bool(self.estimate_.degenerate)
        return self

    def cost_maps(self, X, expansion, depth_prior, confidence=None):
        """Rigidity cost maps of ``X`` under the fitted motion."""
        check_is_fitted(self, "estimate_")
        flow, expansion, depth_prior, conf = check_dense_inputs(X, expansion, depth_prior, confidence)
        K0, K1 = self._intrinsics()
        costs, _ = compute_cost_maps(flow, expansion, depth_prior,
                                     MotionContext.from_estimate(self.estimate_, K0, K1), conf)
        return costs


class RigidMotionSegmenter(ClusterMixin, BaseEstimator):
    """Threshold segmentation of rigid motion; ``labels_`` is 0 for background, -1 invalid."""

    def __init__(self, K0=None, K1=None, t_epi=1.0, t_hom=1.0, t_pp3d=0.05, t_depth=0.15,
                 min_instance_area=50, iters=1000, threshold=0.01, random_state=0):
        self.K0 = K0
        self.K1 = K1
        self.t_epi = t_epi
        self.t_hom = t_hom
        self.t_pp3d = t_pp3d
        self.t_depth = t_depth
        self.min_instance_area = min_instance_area
        self.iters = iters
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, y=None, expansion=None, depth_prior=None, confidence=None):
        if expansion is None or depth_prior is None:
            raise ValueError("expansion and depth_prior are required")
        flow, expansion, depth_prior, conf = check_dense_inputs(X, expansion, depth_prior, confidence)
        if self.K0 is None:
            raise ValueError("K0 is required")
        K0 = check_intrinsics(self.K0)
        K1 = K0 if self.K1 is None else check_intrinsics(self.K1)
        cfg = ThresholdConfig(self.t_epi, self.t_hom, self.t_pp3d, self.t_depth, self.min_instance_area)
        res = run_segmentation(flow, expansion, depth_prior, conf, K0, K1, cfg,
                               _seed(self.random_state), RansacParams(self.iters, self.threshold))
        self.labels_ = res.segmentation.labels
        self.background_ = res.segmentation.background
        self.instances_ = res.segmentation.instances
        self.costs_ = res.costs
        self.ego_ = res.ego
        self.gamma_ = res.extras.get("gamma")
        return self


class RigidSceneFlow(BaseEstimator):
    """Per-segment rigid fits (``fit``) and rigid-body depth and flow (``predict``)."""

    def __init__(self, K0=None, K1=None, parallax_min=PARALLAX_MIN, method="midpoint", n_jobs=1,
                 refine_pnp=False, random_state=0):
        self.K0 = K0
        self.K1 = K1
        self.parallax_min = parallax_min
        self.method = method
        self.n_jobs = n_jobs
        self.refine_pnp = refine_pnp
        self.random_state = random_state

    def _prepare(self, X, labels, expansion, depth_prior, confidence):
        flow, expansion, depth_prior, conf = check_dense_inputs(X, expansion, depth_prior, confidence)
        if depth_prior is None:
            raise ValueError("depth_prior is required")
        labels = check_labels(labels, flow.shape[:2])
        if self.K0 is None:
            raise ValueError("K0 is required")
        K0 = check_intrinsics(self.K0)
        K1 = K0 if self.K1 is None else check_intrinsics(self.K1)
        return flow, labels, expansion, depth_prior, conf, K0, K1

    def fit(self, X, y=None, labels=None, expansion=None, depth_prior=None, confidence=None,
            trusted_depth=None):
        if labels is None:
            raise ValueError("labels are required")
        flow, labels, expansion, depth_prior, conf, K0, K1 = self._prepare(X, labels, expansion,
                                                                            depth_prior, confidence)
        fits = fit_all_segments(labels, flow, conf, depth_prior, K0, K1, _seed(self.random_state),
                                max(1, int(self.n_jobs or 1)), parallax_min=self.parallax_min,
                                method=self.method)
        if self.refine_pnp:
            if trusted_depth is None:
                raise ValueError("refine_pnp needs trusted_depth")
            Z = check_raster(trusted_depth, flow.shape[:2], "trusted_depth")
            fits = [refine_pnp_lm(f, Z, flow, labels, K0, K1, conf) if f.updated else f for f in fits]
        self.fits_ = fits
        return self

    def predict(self, X, labels=None, expansion=None, depth_prior=None, confidence=None):
        check_is_fitted(self, "fits_")
        if labels is None or expansion is None:
            raise ValueError("labels and expansion are required")
        flow, labels, expansion, depth_prior, conf, K0, K1 = self._prepare(X, labels, expansion,
                                                                            depth_prior, confidence)
        return assemble_scene_flow(labels, self.fits_, depth_prior, flow, K0, K1, expansion, conf,
                                   self.method)

    def fit_predict(self, X, y=None, **fields):
        trusted = fields.pop("trusted_depth", None)
        return self.fit(X, y, trusted_depth=trusted, **fields).predict(X, **fields)
