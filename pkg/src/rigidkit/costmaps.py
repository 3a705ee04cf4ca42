"""Dense rigidity cost maps and rectified scene flow.

Float rasters use NaN as the invalid-pixel sentinel.  Every cost map is
non-negative and finite wherever it is not NaN.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateTranslationError, InsufficientDataError
from .geometry import (CameraIntrinsics, RigidTransform, essential_from_motion,
                       fundamental_from_essential, homogeneous, normalize_points, pixel_grid,
                       rotational_homography, sampson_error, triangulate_normalized)

SAMPSON_EPS = 1e-9
HUBER_DELTA = 0.1
MAX_DEPTH = 1e8


@dataclass
class MotionContext:
    K0: CameraIntrinsics
    K1: CameraIntrinsics
    motion: RigidTransform          # camera motion, P0 = Rc P1 + Tc
    degenerate: bool = False
    gamma: Optional[float] = None

    @classmethod
    def from_estimate(cls, est, K0, K1):
        return cls(K0, K1, est.transform, bool(est.degenerate))

    @property
    def H_R(self):
        return rotational_homography(self.K0, self.K1, self.motion.R)

    @property
    def F(self):
        self._require_translation()
        return fundamental_from_essential(essential_from_motion(self.motion.R, self.motion.T),
                                          self.K0, self.K1)

    def _require_translation(self):
        if self.degenerate or np.linalg.norm(self.motion.T) < 1e-12:
            raise DegenerateTranslationError("camera translation is degenerate; use the homography cost")


def _targets(flow):
    flow = np.asarray(flow, dtype=float)
    H, W = flow.shape[:2]
    p0 = pixel_grid(H, W)
    return p0, p0 + flow


def rectified_scene_flow(flow, expansion, ctx: MotionContext):
    """Per-pixel ``K0^-1 (tau H_R p1~ - p0~)`` as an (H, W, 3) array.

    ``H_R p1~`` keeps its third component: with ``tau = Z1/Z0`` this equals
    ``(Rc P1 - P0) / Z0`` exactly, also under camera rotation.
    """
    p0, p1 = _targets(flow)
    tau = np.asarray(expansion, dtype=float)
    q = homogeneous(p1) @ ctx.H_R.T
    with np.errstate(invalid="ignore"):
        sf = (tau[..., None] * q - homogeneous(p0)) @ ctx.K0.K_inv.T
    bad = ~(tau > 0) | ~np.all(np.isfinite(sf), axis=-1)
    sf[bad] = np.nan
    return sf


def cost_epipolar(flow, ctx: MotionContext):
    p0, p1 = _targets(flow)
    return sampson_error(ctx.F, p0, p1, eps=SAMPSON_EPS)


def cost_homography(flow, ctx: MotionContext):
    """Symmetric transfer error (px^2) under the rotational homography."""
    p0, p1 = _targets(flow)
    H = ctx.H_R
    fwd = homogeneous(p1) @ H.T
    bwd = homogeneous(p0) @ np.linalg.inv(H).T
    with np.errstate(divide="ignore", invalid="ignore"):
        d0 = np.sum((p0 - fwd[..., :2] / fwd[..., 2:3]) ** 2, axis=-1)
        d1 = np.sum((p1 - bwd[..., :2] / bwd[..., 2:3]) ** 2, axis=-1)
    c = d0 + d1
    c[~np.isfinite(c)] = np.nan
    return c


def cost_pp3d(scene_flow, ctx: MotionContext):
    """``|T_sf| * |sin(beta)|`` with beta the angle to ``-Tc``, capped at pi/2."""
    ctx._require_translation()
    sf = np.asarray(scene_flow, dtype=float)
    neg_t = -ctx.motion.T / np.linalg.norm(ctx.motion.T)
    norm = np.linalg.norm(sf, axis=-1)
    cross = np.linalg.norm(np.cross(sf, neg_t), axis=-1)
    dot = sf @ neg_t
    beta = np.minimum(np.arctan2(cross, dot), np.pi / 2)
    c = norm * np.abs(np.sin(beta))
    return np.where(norm < 1e-12, 0.0, c)


def triangulate_rigid_depth(flow, ctx: MotionContext, method="midpoint"):
    """Frame-0 depth from flow assuming the whole scene moves with the camera."""
    ctx._require_translation()
    p0, p1 = _targets(flow)
    shape = p0.shape[:2]
    rel = ctx.motion.inverse()
    T = rel.T / np.linalg.norm(rel.T)
    x0 = normalize_points(p0.reshape(-1, 2), ctx.K0)
    x1 = normalize_points(p1.reshape(-1, 2), ctx.K1)
    finite = np.all(np.isfinite(x1), axis=1)
    Z = np.full(len(x0), np.nan)
    if finite.any():
        X, ok = triangulate_normalized(x0[finite], x1[finite], rel.R, T, method)
        with np.errstate(invalid="ignore"):
            z1 = X @ rel.R[2] + T[2]
            good = ok & (X[:, 2] > 0) & (z1 > 0) & (X[:, 2] < MAX_DEPTH)
        Z[np.flatnonzero(finite)[good]] = X[good, 2]
    return Z.reshape(shape)


def align_depth_scale(Z_flow, Z_prior, validity=None, delta=HUBER_DELTA, max_iter=200):
    """Scale ``gamma`` aligning the prior to flow depth, Huber-robust in log depth."""
    Zf = np.asarray(Z_flow, dtype=float)
    Zp = np.asarray(Z_prior, dtype=float)
    ok = np.isfinite(Zf) & np.isfinite(Zp) & (Zf > 0) & (Zp > 0)
    if validity is not None:
        ok &= np.asarray(validity, dtype=bool)
    if ok.sum() < 100:
        raise InsufficientDataError(f"only {int(ok.sum())} jointly valid depth pixels")
    d = np.log(Zf[ok]) - np.log(Zp[ok])
    mu = float(np.median(d))
    # Huber threshold in scale units when the inlier spread is tighter than delta
    sigma = 1.4826 * float(np.median(np.abs(d - mu)))
    delta = max(min(delta, 1.345 * sigma), 1e-12)
    for _ in range(max_iter):
        r = np.abs(d - mu)
        w = np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))
        mu_new = float(np.sum(w * d) / np.sum(w))
        if abs(mu_new - mu) <= 1e-15 * max(1.0, abs(mu)):
            mu = mu_new
            break
        mu = mu_new
    return float(np.exp(mu))


def cost_depth_contrast(Z_flow, Z_prior, gamma):
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.abs(np.log(np.asarray(Z_flow, dtype=float) / (gamma * np.asarray(Z_prior, dtype=float))))
    c[~np.isfinite(c)] = np.nan
    return c


def compute_cost_maps(flow, expansion, depth_prior, ctx: MotionContext, confidence=None):
    """All cost maps available under ``ctx``.

    Returns ``(costs, extras)``: ``costs`` maps ``"hom"`` and, when the
    translation is usable, ``"epi"``, ``"pp3d"`` and ``"depth"``;
    ``extras`` holds the rectified scene flow and, when computed,
    ``Z_flow`` and ``gamma``.  Pixels with confidence <= 0.5 are NaN.
    """
    costs = {"hom": cost_homography(flow, ctx)}
    extras = {}
    if not ctx.degenerate:
        sf = rectified_scene_flow(flow, expansion, ctx)
        extras["scene_flow"] = sf
        costs["epi"] = cost_epipolar(flow, ctx)
        costs["pp3d"] = cost_pp3d(sf, ctx)
        Zf = triangulate_rigid_depth(flow, ctx)
        valid = None if confidence is None else np.asarray(confidence) > 0.5
        gamma = align_depth_scale(Zf, depth_prior, valid)
        ctx.gamma = gamma
        extras["Z_flow"] = Zf
        extras["gamma"] = gamma
        costs["depth"] = cost_depth_contrast(Zf, depth_prior, gamma)
    if confidence is not None:
        low = ~(np.asarray(confidence) > 0.5)
        for c in costs.values():
            c[low] = np.nan
    return costs, extras
