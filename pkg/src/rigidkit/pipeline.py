"""End-to-end stages shared by the command line and the estimator classes."""
from dataclasses import dataclass, field, replace

import numpy as np

from .costmaps import MotionContext, compute_cost_maps
from .egomotion import (DEFAULT_CONFIDENCE, DEFAULT_ITERS, DEFAULT_THRESHOLD, EgomotionEstimate,
                        estimate_egomotion_ransac, sample_correspondences)
from .rigidfit import PARALLAX_MIN, assemble_scene_flow, fit_all_segments, refine_pnp_lm
from .segment import (SegmentationResult, ThresholdConfig, build_segmentation, fill_unknown,
                      segment_moving)


@dataclass
class RansacParams:
    iters: int = DEFAULT_ITERS
    threshold: float = DEFAULT_THRESHOLD
    confidence: float = DEFAULT_CONFIDENCE
    max_correspondences: int = 2000


@dataclass
class SegmentOutput:
    ego: EgomotionEstimate
    context: MotionContext
    costs: dict
    extras: dict
    segmentation: SegmentationResult


def estimate_ego(flow, confidence, K0, K1, seed=0, ransac=None):
    ransac = ransac or RansacParams()
    corr = sample_correspondences(flow, confidence, ransac.max_correspondences, seed)
    return estimate_egomotion_ransac(corr, K0, K1, ransac.iters, ransac.threshold, seed, ransac.confidence)


def no_data_mask(flow, confidence):
    return ~(np.asarray(confidence) > 0) | ~np.all(np.isfinite(flow), axis=-1)


def run_segmentation(flow, expansion, depth_prior, confidence, K0, K1, cfg=None, seed=0, ransac=None):
    """Egomotion, cost maps and threshold segmentation.

    Pixels without data are labelled invalid.  Low-confidence pixels carry
    no cost evidence and take the majority decision of their neighbours.
    """
    cfg = cfg or ThresholdConfig()
    flow = np.asarray(flow, dtype=float)
    est = estimate_ego(flow, confidence, K0, K1, seed, ransac)
    ctx = MotionContext.from_estimate(est, K0, K1)
    costs, extras = compute_cost_maps(flow, expansion, depth_prior, ctx, confidence)
    cfg = replace(cfg, use_hom_instead_of_epi=bool(est.degenerate))
    moving = segment_moving(costs, cfg)
    invalid = no_data_mask(flow, confidence)
    unknown = ~(np.asarray(confidence) > 0.5) & ~invalid
    moving = fill_unknown(moving, unknown | invalid)
    seg = build_segmentation(moving, cfg, invalid)
    return SegmentOutput(est, ctx, costs, extras, seg)


@dataclass
class SceneFlowResult:
    fits: list
    output: object
    extras: dict = field(default_factory=dict)


def run_sceneflow(flow, expansion, depth_prior, confidence, labels, K0, K1, seed=0, threads=1,
                  parallax_min=PARALLAX_MIN, trusted_Z0=None, method="midpoint"):
    """Per-segment fits, optional PnP refinement against ``trusted_Z0``, then assembly."""
    fits = fit_all_segments(labels, flow, confidence, depth_prior, K0, K1, seed, threads,
                            parallax_min=parallax_min, method=method)
    if trusted_Z0 is not None:
        fits = [refine_pnp_lm(f, trusted_Z0, flow, labels, K0, K1, confidence) if f.updated else f
                for f in fits]
    out = assemble_scene_flow(labels, fits, depth_prior, flow, K0, K1, expansion, confidence, method)
    return SceneFlowResult(fits, out)
