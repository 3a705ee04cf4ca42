"""Per-segment rigid fits, scale alignment, PnP refinement and rigid scene flow.

A fit's ``transform`` maps frame-0 camera points of its segment into frame 1,
``P1 = R P0 + T``, with ``T`` already in the units of the depth prior (the
unit-baseline translation times ``scale``).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (BehindCameraError, CheiralityError, DegenerateTranslationError, EstimationError,
                     InsufficientDataError, ZeroParallaxError)
from .egomotion import CorrespondenceSet, estimate_essential_lmeds
from .geometry import (CameraIntrinsics, RigidTransform, backproject, dehomogenize, homogeneous,
                       normalize_points, pixel_grid, triangulate_normalized)

logger = logging.getLogger(__name__)

MIN_SEGMENT_PIXELS = 50
PARALLAX_MIN = 4.0
VALID_FRACTION_MIN = 0.3
SCALE_BAND = 0.10
SCALE_HYPOTHESES = 200
SCALE_MIN_INLIERS = 0.3
MAX_FIT_POINTS = 2000


@dataclass
class RigidBodyFit:
    id: int
    transform: RigidTransform = field(default_factory=RigidTransform)
    scale: float = 1.0
    n_inliers: int = 0
    mean_parallax: float = 0.0
    valid_fraction: float = 0.0
    updated: bool = False
    status: str = "ok"
    rms: Optional[float] = None

    def to_dict(self):
        return {
            "id": int(self.id),
            "R": self.transform.R.tolist(),
            "T": self.transform.T.tolist(),
            "scale": float(self.scale),
            "n_inliers": int(self.n_inliers),
            "mean_parallax": float(self.mean_parallax),
            "valid_fraction": float(self.valid_fraction),
            "updated": bool(self.updated),
            "status": self.status,
            "rms": None if self.rms is None else float(self.rms),
        }


@dataclass
class SceneFlowOutput:
    Z0: np.ndarray
    Z1: np.ndarray
    flow_refined: np.ndarray
    P1: np.ndarray
    updated_mask: Optional[np.ndarray] = None


def triangulate(p0, p1, rt: RigidTransform, K0: CameraIntrinsics, K1: CameraIntrinsics, method="midpoint"):
    """Frame-0 point of one correspondence under ``P1 = R P0 + T``."""
    if np.linalg.norm(rt.T) <= 0:
        raise DegenerateTranslationError("triangulation needs a nonzero baseline")
    x0 = normalize_points(np.asarray(p0, float)[None], K0)
    x1 = normalize_points(np.asarray(p1, float)[None], K1)
    X, ok = triangulate_normalized(x0, x1, rt.R, rt.T, method)
    if not ok[0]:
        raise ZeroParallaxError("rays are parallel")
    X = X[0]
    if X[2] <= 0 or (rt.R @ X + rt.T)[2] <= 0:
        raise BehindCameraError("triangulated point behind a camera")
    return X


def _triangulate_dense(p0, p1, rt, K0, K1, method="midpoint"):
    """Vectorised depths; NaN where the rays are parallel or the point is behind either camera."""
    x0 = normalize_points(p0, K0)
    x1 = normalize_points(p1, K1)
    X, ok = triangulate_normalized(x0, x1, rt.R, rt.T, method)
    with np.errstate(invalid="ignore"):
        z1 = X @ rt.R[2] + rt.T[2]
        ok &= (X[:, 2] > 0) & (z1 > 0)
    return np.where(ok, X[:, 2], np.nan)


def _segment_pixels(labels, flow, confidence, seg_id):
    H, W = labels.shape
    mask = labels == seg_id
    grid = pixel_grid(H, W)
    valid = mask & (np.asarray(confidence) > 0.5) & np.all(np.isfinite(flow), axis=-1)
    return mask, valid, grid[valid], grid[valid] + flow[valid]


def mean_parallax(p0, p1, R, K0, K1):
    """Mean residual flow after warping ``p1`` back by the rotation ``R`` (``P1 = R P0 + T``)."""
    H_R = K0.K @ R.T @ K1.K_inv
    q = dehomogenize(homogeneous(p1) @ H_R.T)
    return float(np.mean(np.linalg.norm(q - p0, axis=1)))


def ransac_scale(ratios, rng, n_hyp=SCALE_HYPOTHESES, band=SCALE_BAND):
    """Scale from single-ratio hypotheses; returns ``(scale, inlier_fraction)``."""
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) == 0:
        return np.nan, 0.0
    best_h, best_n = np.nan, -1
    for i in rng.integers(0, len(ratios), size=n_hyp):
        h = ratios[i]
        n = int(np.count_nonzero(np.abs(ratios / h - 1.0) <= band))
        if n > best_n:
            best_h, best_n = h, n
    inl = np.abs(ratios / best_h - 1.0) <= band
    s = float(np.median(ratios[inl]))
    return s, float(np.count_nonzero(np.abs(ratios / s - 1.0) <= band)) / len(ratios)


def gate_update(fit: RigidBodyFit, parallax_min=PARALLAX_MIN):
    return bool(fit.mean_parallax >= parallax_min and fit.valid_fraction >= VALID_FRACTION_MIN)


def fit_segment(labels, flow, confidence, Z_prior, seg_id, K0, K1, seed=0,
                parallax_min=PARALLAX_MIN, method="midpoint"):
    """LMedS essential fit, cheirality, triangulation and RANSAC scale for one segment.

    Failures do not raise; they return ``updated=False`` with ``status``
    naming the failing stage.
    """
    labels = np.asarray(labels)
    flow = np.asarray(flow, dtype=float)
    Z_prior = np.asarray(Z_prior, dtype=float)
    mask, valid, p0, p1 = _segment_pixels(labels, flow, confidence, seg_id)
    area = int(mask.sum())
    fit = RigidBodyFit(int(seg_id))
    if len(p0) < MIN_SEGMENT_PIXELS:
        fit.status = "too_few_pixels"
        fit.valid_fraction = len(p0) / area if area else 0.0
        return fit

    rng = np.random.default_rng([int(seed), int(seg_id)])
    sub = np.arange(len(p0))
    if len(sub) > MAX_FIT_POINTS:
        sub = np.sort(rng.choice(sub, size=MAX_FIT_POINTS, replace=False))
    corr = CorrespondenceSet(p0[sub], p1[sub])
    try:
        est = estimate_essential_lmeds(corr, K0, K1, seed=int(rng.integers(2 ** 31)))
    except (EstimationError, InsufficientDataError) as exc:
        fit.status = f"estimation_failed: {exc}"
        return fit
    except CheiralityError as exc:
        fit.status = f"cheirality_failed: {exc}"
        return fit
    fit.n_inliers = est.n_inliers
    unit = est.transform.inverse()
    fit.transform = unit
    fit.mean_parallax = mean_parallax(p0, p1, unit.R, K0, K1)
    if est.degenerate:
        fit.status = "degenerate_translation"
        return fit

    Z_tri = _triangulate_dense(p0, p1, unit, K0, K1, method)
    zp = Z_prior[valid]
    ok = np.isfinite(Z_tri) & np.isfinite(zp) & (zp > 0)
    fit.valid_fraction = int(ok.sum()) / area
    scale, frac = ransac_scale(zp[ok] / Z_tri[ok], rng)
    if not frac >= SCALE_MIN_INLIERS:
        fit.status = "scale_failed"
        return fit
    fit.scale = scale
    fit.transform = RigidTransform(unit.R, scale * unit.T)
    fit.updated = gate_update(fit, parallax_min)
    if not fit.updated:
        fit.status = "gated"
    return fit


def fit_all_segments(labels, flow, confidence, Z_prior, K0, K1, seed=0, threads=1, **kw):
    """One fit per label id >= 0, in id order; ``threads`` only changes scheduling."""
    ids = [int(i) for i in np.unique(labels) if i >= 0]
    job = lambda i: fit_segment(labels, flow, confidence, Z_prior, i, K0, K1, seed, **kw)
    if threads <= 1:
        return [job(i) for i in ids]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, ids))


# --------------------------------------------------------------------------- PnP refinement

def _reprojection(R, T, P0, p1, K1):
    Q = P0 @ R.T + T
    q = Q @ K1.K.T
    return q[:, :2] / q[:, 2:3] - p1, Q


def _pnp_jacobian(Q, R_P0, K1):
    X, Y, Z = Q[:, 0], Q[:, 1], Q[:, 2]
    fx, fy, s = K1.fx, K1.fy, K1.skew
    n = len(Q)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = fx / Z
    dproj[:, 0, 1] = s / Z
    dproj[:, 0, 2] = -(fx * X + s * Y) / Z ** 2
    dproj[:, 1, 1] = fy / Z
    dproj[:, 1, 2] = -fy * Y / Z ** 2
    # left perturbation R <- exp([w]x) R: dQ/dw = -[R P0]x
    a = R_P0
    dQdw = np.zeros((n, 3, 3))
    dQdw[:, 0, 1], dQdw[:, 0, 2] = a[:, 2], -a[:, 1]
    dQdw[:, 1, 0], dQdw[:, 1, 2] = -a[:, 2], a[:, 0]
    dQdw[:, 2, 0], dQdw[:, 2, 1] = a[:, 1], -a[:, 0]
    J = np.concatenate([dproj @ dQdw, dproj], axis=2)
    return J.reshape(2 * n, 6)


def refine_pnp_lm(fit: RigidBodyFit, Z0, flow, labels, K0, K1, confidence=None,
                  max_iter=100, max_rejects=10):
    """Levenberg-Marquardt on reprojection error with depths ``Z0`` held fixed.

    Returns a new fit whose ``rms`` is the per-coordinate RMS reprojection
    error.  Steps are only accepted when they lower the cost.  If no step
    is ever accepted before ``max_rejects`` consecutive rejections the input
    transform is returned with ``status = "lm_diverged"``.
    """
    Z0 = np.asarray(Z0, dtype=float)
    flow = np.asarray(flow, dtype=float)
    H, W = Z0.shape
    mask = (np.asarray(labels) == fit.id) & np.isfinite(Z0) & (Z0 > 0) & np.all(np.isfinite(flow), axis=-1)
    if confidence is not None:
        mask &= np.asarray(confidence) > 0.5
    if mask.sum() < 3:
        return replace(fit, status="pnp_too_few_pixels")
    p0 = pixel_grid(H, W)[mask]
    p1 = p0 + flow[mask]
    P0 = backproject(p0, Z0[mask], K0)

    R, T = fit.transform.R.copy(), fit.transform.T.copy()
    r, Q = _reprojection(R, T, P0, p1, K1)
    if np.any(Q[:, 2] <= 0):
        return replace(fit, status="pnp_behind_camera")
    cost = float(np.sum(r * r))
    rms0 = np.sqrt(cost / r.size)
    lam = 1e-3
    accepted = 0
    rejects = 0
    for _ in range(max_iter):
        J = _pnp_jacobian(Q, P0 @ R.T, K1)
        g = J.T @ r.ravel()
        if np.max(np.abs(g)) <= 1e-12 * max(cost, 1e-300) ** 0.5 or cost <= 1e-30:
            break
        A = J.T @ J
        step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), -g)
        R_new = Rotation.from_rotvec(step[:3]).as_matrix() @ R
        T_new = T + step[3:]
        r_new, Q_new = _reprojection(R_new, T_new, P0, p1, K1)
        cost_new = float(np.sum(r_new * r_new)) if np.all(Q_new[:, 2] > 0) else np.inf
        if cost_new < cost:
            rel = (cost - cost_new) / max(cost, 1e-300)
            R, T, r, Q, cost = R_new, T_new, r_new, Q_new, cost_new
            lam = max(lam / 10.0, 1e-12)
            accepted += 1
            rejects = 0
            if rel < 1e-15:
                break
        else:
            lam *= 10.0
            rejects += 1
            if rejects >= max_rejects:
                break
    if rejects >= max_rejects and accepted == 0:
        logger.warning("segment %d: PnP-LM made no progress, keeping input transform", fit.id)
        return replace(fit, status="lm_diverged", rms=float(rms0))
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return replace(fit, transform=RigidTransform(R, T), rms=float(np.sqrt(cost / r.size)),
                   scale=float(np.linalg.norm(T)))


def reprojection_rms(transform, Z0, flow, mask, K0, K1):
    H, W = Z0.shape
    p0 = pixel_grid(H, W)[mask]
    r, _ = _reprojection(transform.R, transform.T, backproject(p0, Z0[mask], K0), p0 + flow[mask], K1)
    return float(np.sqrt(np.mean(r * r)))


# --------------------------------------------------------------------------- assembly

def assemble_scene_flow(labels, fits, Z_prior, flow, K0, K1, expansion, confidence=None,
                        method="midpoint"):
    """Rigid-body scene flow ``P1 = R_i P0 + T_i`` over updated segments.

    Updated segments get depth from triangulation under their metric
    transform (falling back to ``Z_prior`` at low-confidence pixels or
    where triangulation fails) and flow from reprojecting ``P1``.  Every
    other pixel passes the inputs through, with ``Z1 = Z_prior * tau``.
    """
    labels = np.asarray(labels)
    flow = np.asarray(flow, dtype=float)
    Z_prior = np.asarray(Z_prior, dtype=float)
    expansion = np.asarray(expansion, dtype=float)
    H, W = labels.shape
    by_id = {int(f.id): f for f in fits}
    missing = sorted(set(int(i) for i in np.unique(labels) if i >= 0) - set(by_id))
    if missing:
        raise ValueError(f"no fit for label ids {missing}")

    Z0 = Z_prior.copy()
    Z1 = Z_prior * expansion
    out_flow = flow.copy()
    grid = pixel_grid(H, W)
    with np.errstate(invalid="ignore"):
        P1 = backproject_or_nan(grid + flow, Z1, K1)
    updated = np.zeros((H, W), dtype=bool)

    for seg_id in sorted(by_id):
        fit = by_id[seg_id]
        if not fit.updated:
            continue
        mask = labels == seg_id
        p0 = grid[mask]
        f = flow[mask]
        z = Z_prior[mask].copy()
        trusted = np.all(np.isfinite(f), axis=1)
        if confidence is not None:
            trusted &= np.asarray(confidence)[mask] > 0.5
        if trusted.any():
            zt = _triangulate_dense(p0[trusted], p0[trusted] + f[trusted], fit.transform, K0, K1, method)
            sel = np.flatnonzero(trusted)
            good = np.isfinite(zt)
            z[sel[good]] = zt[good]
        ok = np.isfinite(z) & (z > 0)
        P0 = normalize_points(p0[ok], K0) * z[ok, None]
        Q = fit.transform.apply(P0)
        front = Q[:, 2] > 0
        idx = np.flatnonzero(mask.ravel())[np.flatnonzero(ok)[front]]
        Q = Q[front]
        proj = dehomogenize(Q @ K1.K.T)
        Z0.reshape(-1)[idx] = z[ok][front]
        Z1.reshape(-1)[idx] = Q[:, 2]
        out_flow.reshape(-1, 2)[idx] = proj - grid.reshape(-1, 2)[idx]
        P1.reshape(-1, 3)[idx] = Q
        updated.reshape(-1)[idx] = True
    return SceneFlowOutput(Z0, Z1, out_flow, P1, updated)


def backproject_or_nan(p, Z, K):
    Z = np.asarray(Z, dtype=float)
    P = normalize_points(p, K) * Z[..., None]
    P[~(Z > 0)] = np.nan
    return P
