"""Camera egomotion from dense flow: five-point RANSAC / LMedS and decomposition."""
import logging
from dataclasses import dataclass, field
from itertools import permutations
from typing import Optional

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .errors import CheiralityError, EstimationError, InsufficientDataError
from .geometry import (CameraIntrinsics, RigidTransform, normalize_points, pixel_grid, skew,
                       triangulate_normalized)

logger = logging.getLogger(__name__)

DEFAULT_ITERS = 1000
DEFAULT_THRESHOLD = 0.01      # Sampson distance, normalized image units
DEFAULT_CONFIDENCE = 0.999
DEGENERACY_RATIO = 0.95


@dataclass
class CorrespondenceSet:
    p0: np.ndarray                      # (N, 2) pixels in frame 0
    p1: np.ndarray                      # (N, 2) pixels in frame 1
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=float).reshape(-1, 2)
        self.p1 = np.asarray(self.p1, dtype=float).reshape(-1, 2)
        if self.p0.shape != self.p1.shape:
            raise ValueError("p0 and p1 must have the same length")

    def __len__(self):
        return len(self.p0)

    def subset(self, mask):
        w = None if self.weights is None else self.weights[mask]
        return CorrespondenceSet(self.p0[mask], self.p1[mask], w)

    def normalized(self, K0, K1):
        return normalize_points(self.p0, K0), normalize_points(self.p1, K1)


@dataclass
class EgomotionEstimate:
    transform: RigidTransform           # camera motion (Rc, Tc), P0 = Rc P1 + Tc
    inlier_mask: np.ndarray
    residual_median: float
    degenerate: bool
    E: Optional[np.ndarray] = None      # normalized-coordinate essential matrix
    residuals: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_inliers(self):
        return int(np.count_nonzero(self.inlier_mask))


# --------------------------------------------------------------------------- sampling

def sample_correspondences(flow, confidence, max_n=2000, seed=0):
    """Draw up to ``max_n`` pixel correspondences with confidence above 0.5."""
    flow = np.asarray(flow, dtype=float)
    confidence = np.asarray(confidence, dtype=float)
    if flow.shape[:2] != confidence.shape:
        raise ValueError("flow and confidence dimensions differ")
    H, W = confidence.shape
    p0 = pixel_grid(H, W)
    p1 = p0 + flow
    ok = (confidence > 0.5) & np.all(np.isfinite(flow), axis=-1)
    ok &= (p1[..., 0] >= 0) & (p1[..., 0] <= W) & (p1[..., 1] >= 0) & (p1[..., 1] <= H)
    idx = np.flatnonzero(ok.ravel())
    if len(idx) < 5:
        raise InsufficientDataError(f"only {len(idx)} confident correspondences")
    rng = np.random.default_rng(seed)
    if len(idx) > max_n:
        idx = np.sort(rng.choice(idx, size=max_n, replace=False))
    return CorrespondenceSet(p0.reshape(-1, 2)[idx], p1.reshape(-1, 2)[idx],
                             confidence.ravel()[idx])


# --------------------------------------------------------------------------- five-point solver

# monomial order: first ten are eliminated, rows 4..9 lead with x^2z, x^2, y^2z, y^2, xyz, xy
_MONOMIALS = [(3, 0, 0), (0, 3, 0), (2, 1, 0), (1, 2, 0), (2, 0, 1), (2, 0, 0), (0, 2, 1), (0, 2, 0),
              (1, 1, 1), (1, 1, 0), (1, 0, 2), (1, 0, 1), (1, 0, 0), (0, 1, 2), (0, 1, 1), (0, 1, 0),
              (0, 0, 3), (0, 0, 2), (0, 0, 1), (0, 0, 0)]
_MONO_INDEX = {m: i for i, m in enumerate(_MONOMIALS)}


def _cubic_map():
    # (x, y, z, 1)^3 tensor index -> monomial column
    M = np.zeros((64, 20))
    for a in range(4):
        for b in range(4):
            for c in range(4):
                e = [0, 0, 0]
                for v in (a, b, c):
                    if v < 3:
                        e[v] += 1
                if sum(e) in (3, 2, 1, 0):
                    M[(a * 4 + b) * 4 + c, _MONO_INDEX[tuple(e)]] = 1.0
    return M


_CUBIC_MAP = _cubic_map()
_EPS3 = np.zeros((3, 3, 3))
for _p in permutations(range(3)):
    _EPS3[_p] = np.linalg.det(np.eye(3)[list(_p)])


def _constraint_matrix(basis):
    """10x20 coefficients of det(E)=0 and 2EE^TE - tr(EE^T)E = 0."""
    Ec = np.stack(basis, axis=-1)                     # (3, 3, 4)
    det = np.einsum("ijk,ia,jb,kc->abc", _EPS3, Ec[0], Ec[1], Ec[2])
    Q = np.einsum("ija,kjb->ikab", Ec, Ec)
    tr = np.einsum("iiab->ab", Q)
    C = 2.0 * np.einsum("ikab,klc->ilabc", Q, Ec) - np.einsum("ab,ilc->ilabc", tr, Ec)
    rows = [det.reshape(64)] + [C[i, l].reshape(64) for i in range(3) for l in range(3)]
    return np.array(rows) @ _CUBIC_MAP


def _poly_of_row(r):
    """Split a reduced row's trailing ten coefficients into x, y, 1 polynomials in z.

    Polynomials are ascending-power arrays of length 5.
    """
    out = np.zeros((3, 5))
    for col in range(10, 20):
        ex, ey, ez = _MONOMIALS[col]
        g = 0 if ex else (1 if ey else 2)
        out[g, ez] += r[col]
    return out


def _hidden_variable_matrix(G):
    B = np.zeros((3, 3, 6))
    for k, (ra, rb) in enumerate(((4, 5), (6, 7), (8, 9))):
        a = _poly_of_row(G[ra])
        b = _poly_of_row(G[rb])
        B[k, :, :5] += a
        B[k, :, 1:] -= b            # multiply by z
    return B


def _pmul(a, b):
    return np.convolve(a, b)


def _det_poly(B):
    def p(i, j):
        return np.trim_zeros(B[i, j], "b") if np.any(B[i, j]) else np.zeros(1)

    def padd(*ps):
        n = max(len(q) for q in ps)
        out = np.zeros(n)
        for q in ps:
            out[:len(q)] += q
        return out

    c0 = padd(_pmul(p(1, 1), p(2, 2)), -_pmul(p(1, 2), p(2, 1)))
    c1 = padd(_pmul(p(1, 0), p(2, 2)), -_pmul(p(1, 2), p(2, 0)))
    c2 = padd(_pmul(p(1, 0), p(2, 1)), -_pmul(p(1, 1), p(2, 0)))
    return padd(_pmul(p(0, 0), c0), -_pmul(p(0, 1), c1), _pmul(p(0, 2), c2))


_NULL_MIX = np.linalg.qr(np.random.default_rng(20240611).normal(size=(4, 4)))[0]


def enforce_essential(E):
    U, S, Vt = np.linalg.svd(E)
    s = 0.5 * (S[0] + S[1])
    return U @ np.diag([s, s, 0.0]) @ Vt


def five_point_normalized(x0, x1):
    """Essential matrices from five normalized correspondences (rays with unit z)."""
    A = np.einsum("ni,nj->nij", x1, x0).reshape(len(x0), 9)
    _, S, Vt = np.linalg.svd(A, full_matrices=True)
    if len(S) < 5 or S[4] < 1e-10 * S[0]:
        return []
    # a generic mix of the null vectors keeps the solution off the plane at infinity of
    # the (x, y, z, 1) parametrization, e.g. antisymmetric E under pure translation
    null = _NULL_MIX @ Vt[5:9]
    basis = [null[k].reshape(3, 3) for k in range(4)]
    M = _constraint_matrix(basis)
    lead = M[:, :10]
    if np.linalg.cond(lead) > 1e12:
        return []
    G = np.linalg.solve(lead, M)
    B = _hidden_variable_matrix(G)
    dpoly = np.trim_zeros(_det_poly(B), "b")
    if len(dpoly) < 2 or not np.all(np.isfinite(dpoly)):
        return []
    roots = np.roots(dpoly[::-1])
    out = []
    for z in roots:
        if abs(z.imag) > 1e-8 * max(1.0, abs(z.real)):
            continue
        z = z.real
        powers = z ** np.arange(5)
        Bz = B[:, :, :5] @ powers + B[:, :, 5] * z ** 5
        _, _, vt = np.linalg.svd(Bz)
        v = vt[-1]
        if abs(v[2]) < 1e-12:
            continue
        x, y = v[0] / v[2], v[1] / v[2]
        E = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        n = np.linalg.norm(E)
        if not np.isfinite(n) or n == 0:
            continue
        out.append(enforce_essential(E / n))
    return out


def five_point_essential(p0, p1, K0: CameraIntrinsics, K1: CameraIntrinsics):
    """Candidate essential matrices (normalized coordinates) from exactly five pixel pairs."""
    p0 = np.asarray(p0, dtype=float).reshape(-1, 2)
    p1 = np.asarray(p1, dtype=float).reshape(-1, 2)
    if len(p0) != 5 or len(p1) != 5:
        raise ValueError("five_point_essential needs exactly five correspondences")
    return five_point_normalized(normalize_points(p0, K0), normalize_points(p1, K1))


def eight_point_normalized(x0, x1):
    """Hartley-normalized linear estimate, projected to the essential manifold."""
    def conditioner(x):
        c = x[:, :2].mean(axis=0)
        d = np.sqrt(((x[:, :2] - c) ** 2).sum(axis=1)).mean()
        s = np.sqrt(2.0) / max(d, 1e-12)
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])

    T0, T1 = conditioner(x0), conditioner(x1)
    y0, y1 = x0 @ T0.T, x1 @ T1.T
    A = np.einsum("ni,nj->nij", y1, y0).reshape(len(x0), 9)
    _, _, Vt = np.linalg.svd(A)
    E = T1.T @ Vt[-1].reshape(3, 3) @ T0
    E = enforce_essential(E)
    return E / np.linalg.norm(E)


def sampson_distance(E, x0, x1):
    """Signed first-order distance of normalized correspondences to ``x1^T E x0 = 0``."""
    Ex0 = x0 @ E.T
    Etx1 = x1 @ E
    r = np.einsum("ij,ij->i", x1, Ex0)
    den = np.sqrt(Ex0[:, 0] ** 2 + Ex0[:, 1] ** 2 + Etx1[:, 0] ** 2 + Etx1[:, 1] ** 2)
    return r / np.maximum(den, 1e-300)


# --------------------------------------------------------------------------- decomposition

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def _pose_candidates(E):
    """(R, t) pairs with ``E ~ [t]x R`` and ``P1 = R P0 + t``."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    t = U[:, 2]
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def _cheirality_votes(R, t, x0, x1):
    X, ok = triangulate_normalized(x0, x1, R, t)
    with np.errstate(invalid="ignore"):
        z1 = X @ R[2] + t[2]
    return int(np.count_nonzero(ok & (X[:, 2] > 0) & (z1 > 0)))


def decompose_essential(E, corr: CorrespondenceSet, K0, K1):
    """Camera motion ``(Rc, Tc)`` with unit ``Tc`` selected by cheirality voting."""
    x0, x1 = corr.normalized(K0, K1)
    S = np.linalg.svd(E, compute_uv=False)
    if S[0] <= 0 or abs(S[0] - S[1]) > 1e-3 * S[0] or S[2] > 1e-3 * S[0]:
        raise ValueError("matrix is not an essential matrix")
    # decomposition is computed from -E when E's sign would flip the SVD, so fix a sign
    Es = E if E.flat[np.argmax(np.abs(E))] > 0 else -E
    votes = [(_cheirality_votes(R, t, x0, x1), i, R, t) for i, (R, t) in enumerate(_pose_candidates(Es))]
    best = max(votes, key=lambda v: (v[0], -v[1]))
    n, _, R, t = best
    if n <= 0.5 * len(x0):
        raise CheiralityError(f"best decomposition has {n}/{len(x0)} points in front of both cameras")
    R = _orthonormalize(R)
    return RigidTransform(R.T, -R.T @ t / np.linalg.norm(t))


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


# --------------------------------------------------------------------------- nonlinear refinement

def _tangent_basis(t):
    a = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(t, a)
    b1 /= np.linalg.norm(b1)
    return b1, np.cross(t, b1)


def refine_essential(E, x0, x1, f_scale):
    """Robust (Cauchy) least squares on Sampson distance over rotation and unit translation."""
    if len(x0) < 6:
        return E
    R0, t0 = _pose_candidates(E)[0]
    b1, b2 = _tangent_basis(t0)

    def unpack(q):
        R = Rotation.from_rotvec(q[:3]).as_matrix() @ R0
        t = t0 + q[3] * b1 + q[4] * b2
        return R, t / np.linalg.norm(t)

    def resid(q):
        R, t = unpack(q)
        return sampson_distance(skew(t) @ R, x0, x1)

    r0 = resid(np.zeros(5))
    if np.max(np.abs(r0)) < 1e-14:
        return E
    sol = least_squares(resid, np.zeros(5), method="trf", loss="cauchy", f_scale=f_scale,
                        x_scale=1.0, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200)
    R, t = unpack(sol.x)
    E2 = skew(t) @ R
    return E2 / np.linalg.norm(E2)


# --------------------------------------------------------------------------- rotation-only model

def _kabsch(a, b):
    """Rotation R minimising sum |b - R a|^2 for unit rows a, b."""
    M = b.T @ a
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def rotation_transfer_distance(Rc, x0, x1):
    """Half the symmetric transfer distance of ``x0 ~ Rc x1`` in normalized units."""
    f = x1 @ Rc.T
    b = x0 @ Rc
    with np.errstate(divide="ignore", invalid="ignore"):
        d0 = np.linalg.norm(x0[:, :2] - f[:, :2] / f[:, 2:3], axis=1)
        d1 = np.linalg.norm(x1[:, :2] - b[:, :2] / b[:, 2:3], axis=1)
    d = 0.5 * np.sqrt(d0 ** 2 + d1 ** 2)
    return np.where(np.isfinite(d), d, np.inf)


def fit_rotation_homography(corr: CorrespondenceSet, K0, K1, iters=200, threshold=DEFAULT_THRESHOLD, seed=0):
    """Robust rotation-only model ``H = K0 R K1^-1``; returns (R, inlier_mask, distances)."""
    x0, x1 = corr.normalized(K0, K1)
    u0 = x0 / np.linalg.norm(x0, axis=1, keepdims=True)
    u1 = x1 / np.linalg.norm(x1, axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    N = len(x0)
    best = (-1, np.inf, np.eye(3))
    for _ in range(iters):
        s = rng.choice(N, size=2, replace=False)
        R = _kabsch(u1[s], u0[s])
        d = rotation_transfer_distance(R, x0, x1)
        cnt = int(np.count_nonzero(d < threshold))
        med = float(np.median(d))
        if cnt > best[0] or (cnt == best[0] and med < best[1]):
            best = (cnt, med, R)
        if cnt == N:
            break
    R = best[2]
    inl = rotation_transfer_distance(R, x0, x1) < threshold
    if inl.sum() >= 2:
        R = _kabsch(u1[inl], u0[inl])

        def resid(q):
            Rq = Rotation.from_rotvec(q).as_matrix() @ R
            f = x1[inl] @ Rq.T
            return (x0[inl, :2] - f[:, :2] / f[:, 2:3]).ravel()

        if np.max(np.abs(resid(np.zeros(3)))) > 1e-14:
            sol = least_squares(resid, np.zeros(3), loss="cauchy", f_scale=threshold / 4.0,
                                xtol=1e-15, ftol=1e-15, gtol=1e-15)
            R = Rotation.from_rotvec(sol.x).as_matrix() @ R
    d = rotation_transfer_distance(R, x0, x1)
    return R, d < threshold, d


def detect_degenerate_translation(corr, E, Rc_hom, K0, K1, threshold=DEFAULT_THRESHOLD,
                                  ratio=DEGENERACY_RATIO):
    """True when the rotation-only model explains about as many pairs as ``E``."""
    x0, x1 = corr.normalized(K0, K1)
    n_h = int(np.count_nonzero(rotation_transfer_distance(Rc_hom, x0, x1) < threshold))
    n_e = 0 if E is None else int(np.count_nonzero(np.abs(sampson_distance(E, x0, x1)) < threshold))
    return n_h >= ratio * n_e


# --------------------------------------------------------------------------- robust estimators

def _finish(E, corr, K0, K1, threshold, seed, inlier_threshold=None):
    """Shared tail: degeneracy test, inlier quorum, decomposition."""
    x0, x1 = corr.normalized(K0, K1)
    N = len(x0)
    inl_thr = threshold if inlier_threshold is None else inlier_threshold
    r = np.abs(sampson_distance(E, x0, x1)) if E is not None else np.full(N, np.inf)
    e_mask = r < inl_thr
    # the rotation-only model is judged at the same band as the essential model
    R_h, h_mask, d_h = fit_rotation_homography(corr, K0, K1, threshold=inl_thr, seed=seed)
    degenerate = detect_degenerate_translation(corr, E, R_h, K0, K1, inl_thr)
    if degenerate:
        est = EgomotionEstimate(RigidTransform(R_h, np.zeros(3)), h_mask, float(np.median(d_h)), True,
                                None, d_h)
        if h_mask.sum() < 0.5 * N:
            raise EstimationError("rotation-only model has fewer than 50% inliers", est)
        return est
    if e_mask.sum() < 0.5 * N:
        raise EstimationError("essential model has fewer than 50% inliers",
                              EgomotionEstimate(RigidTransform(), e_mask, float(np.median(r)), False, E, r))
    rt = decompose_essential(E, corr.subset(e_mask), K0, K1)
    return EgomotionEstimate(rt, e_mask, float(np.median(r)), False, E, r)


def _hypotheses(x0, x1, rng, N):
    s = rng.choice(N, size=5, replace=False)
    cands = five_point_normalized(x0[s], x1[s])
    if not cands and N >= 8:
        s8 = rng.choice(N, size=8, replace=False)
        cands = [eight_point_normalized(x0[s8], x1[s8])]
    return cands


def estimate_egomotion_ransac(corr: CorrespondenceSet, K0, K1, iters=DEFAULT_ITERS,
                              threshold=DEFAULT_THRESHOLD, seed=0, confidence=DEFAULT_CONFIDENCE):
    """Five-point RANSAC with adaptive termination, inlier re-fit and degeneracy test."""
    N = len(corr)
    if N < 5:
        raise InsufficientDataError("need at least five correspondences")
    x0, x1 = corr.normalized(K0, K1)
    rng = np.random.default_rng(seed)
    best_cnt, best_med, best_E = -1, np.inf, None
    needed = iters
    i = 0
    while i < min(iters, needed):
        for E in _hypotheses(x0, x1, rng, N):
            r = np.abs(sampson_distance(E, x0, x1))
            cnt = int(np.count_nonzero(r < threshold))
            med = float(np.median(r))
            if cnt > best_cnt or (cnt == best_cnt and med < best_med):
                best_cnt, best_med, best_E = cnt, med, E
                w = cnt / N
                if w >= 1.0:
                    needed = 0
                elif w > 0:
                    needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - w ** 5)))
        i += 1
    logger.debug("ransac: %d iterations, best %d/%d inliers", i, best_cnt, N)

    E = best_E
    if E is not None:
        inl = np.abs(sampson_distance(E, x0, x1)) < threshold
        if inl.sum() >= 8:
            E_lin = eight_point_normalized(x0[inl], x1[inl])
            if np.median(np.abs(sampson_distance(E_lin, x0[inl], x1[inl]))) < \
                    np.median(np.abs(sampson_distance(E, x0[inl], x1[inl]))):
                E = E_lin
            E = refine_essential(E, x0[inl], x1[inl], threshold / 4.0)
            E = _polish(E, x0, x1, threshold)
    return _finish(E, corr, K0, K1, threshold, seed)


def _polish(E, x0, x1, threshold, rounds=3):
    """Re-fit on a shrinking inlier band set by the robust residual scale."""
    for _ in range(rounds):
        r = np.abs(sampson_distance(E, x0, x1))
        inl = r < threshold
        if inl.sum() < 8:
            break
        sigma = 1.4826 * float(np.median(r[inl]))
        band = r < min(threshold, max(3.0 * sigma, 1e-10))
        if band.sum() < 8:
            break
        E = refine_essential(E, x0[band], x1[band], max(sigma, 1e-10))
    return E


def estimate_essential_lmeds(corr: CorrespondenceSet, K0, K1, seed=0, n_samples=500,
                             threshold=DEFAULT_THRESHOLD):
    """Least-median-of-squares essential fit over minimal five-point samples."""
    N = len(corr)
    if N < 5:
        raise InsufficientDataError("need at least five correspondences")
    x0, x1 = corr.normalized(K0, K1)
    rng = np.random.default_rng(seed)
    best_med, best_E = np.inf, None
    for _ in range(n_samples):
        for E in _hypotheses(x0, x1, rng, N):
            med = float(np.median(sampson_distance(E, x0, x1) ** 2))
            if med < best_med:
                best_med, best_E = med, E
        if best_med < 1e-26:
            break
    if best_E is None:
        raise EstimationError("no essential hypothesis found")
    sigma = 1.4826 * (1.0 + 5.0 / max(N - 5, 1)) * np.sqrt(best_med)
    inl_thr = max(2.5 * sigma, 1e-9)
    E = best_E
    inl = np.abs(sampson_distance(E, x0, x1)) < inl_thr
    E = refine_essential(E, x0[inl], x1[inl], max(sigma, 1e-9))
    med_final = float(np.median(sampson_distance(E, x0, x1) ** 2))
    sigma_final = 1.4826 * (1.0 + 5.0 / max(N - 5, 1)) * np.sqrt(med_final)
    return _finish(E, corr, K0, K1, threshold, seed,
                   inlier_threshold=min(threshold, max(2.5 * sigma_final, 1e-9)))
