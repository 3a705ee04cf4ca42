"""Camera, rigid-transform and two-view projective primitives.

Conventions used throughout the package:

* Camera frames are right-handed, x right, y down, z forward.
* Camera motion ``(Rc, Tc)`` maps frame-1 camera coordinates into frame 0,
  ``P0 = Rc @ P1 + Tc`` for every static point.
* Pixel ``(i, j)`` (row, column) has continuous coordinates
  ``(j + 0.5, i + 0.5)``.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCameraError, DegenerateTranslationError, GeometryError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "skew"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise GeometryError(f"intrinsic {name} is not finite")
            object.__setattr__(self, name, v)
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")

    @property
    def K(self):
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        fx, fy, cx, cy, s = self.fx, self.fy, self.cx, self.cy, self.skew
        return np.array([[1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy)],
                         [0.0, 1.0 / fy, -cy / fy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K):
        K = np.asarray(K, dtype=float)
        if K.shape != (3, 3) or abs(K[2, 2] - 1.0) > 1e-12 or np.any(np.abs(K[[1, 2, 2], [0, 0, 1]]) > 0):
            raise GeometryError("K must be 3x3 upper-triangular with K[2,2] = 1")
        return cls(K[0, 0], K[1, 1], K[0, 2], K[1, 2], K[0, 1])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "skew": self.skew}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["fx"], d["fy"], d["cx"], d["cy"], d.get("skew", 0.0))
        except (KeyError, TypeError) as exc:
            raise GeometryError(f"bad intrinsics document: {exc}") from None


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation; ``apply`` computes ``R @ P + T``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        T = np.array(self.T, dtype=float).reshape(-1)
        if R.shape != (3, 3) or T.shape != (3,):
            raise GeometryError("R must be 3x3 and T a 3-vector")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError("R is not a rotation matrix")
        R.flags.writeable = False
        T.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @classmethod
    def from_quaternion(cls, q, T=(0.0, 0.0, 0.0)):
        """``q`` is (x, y, z, w), scalar last."""
        return cls(Rotation.from_quat(q).as_matrix(), T)

    @classmethod
    def from_rotvec(cls, rotvec, T=(0.0, 0.0, 0.0)):
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), T)

    def as_quaternion(self):
        return Rotation.from_matrix(self.R).as_quat()

    def inverse(self):
        return RigidTransform(self.R.T, -self.R.T @ self.T)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.R @ other.R, self.R @ other.T + self.T)

    def apply(self, P):
        P = np.asarray(P, dtype=float)
        return P @ self.R.T + self.T

    def to_dict(self):
        return {"R": self.R.tolist(), "T": self.T.tolist()}

    @classmethod
    def from_dict(cls, d):
        if "q" in d:
            return cls.from_quaternion(d["q"], d.get("T", (0, 0, 0)))
        return cls(d["R"], d["T"])


def rotation_about(axis, degrees):
    axis = np.asarray(axis, dtype=float)
    return Rotation.from_rotvec(np.deg2rad(degrees) * axis / np.linalg.norm(axis)).as_matrix()


def project_to_so3(M):
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def rotation_angle_deg(Ra, Rb):
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def angle_between_deg(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))


def skew(t):
    t = np.asarray(t, dtype=float)
    return np.array([[0.0, -t[2], t[1]],
                     [t[2], 0.0, -t[0]],
                     [-t[1], t[0], 0.0]])


def homogeneous(p):
    p = np.asarray(p, dtype=float)
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


def dehomogenize(q):
    q = np.asarray(q, dtype=float)
    return q[..., :2] / q[..., 2:3]


def pixel_grid(height, width):
    """(H, W, 2) array of pixel-centre coordinates (u, v)."""
    v, u = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([u + 0.5, v + 0.5], axis=-1)


def normalize_points(p, K: CameraIntrinsics):
    """Pixels (..., 2) to normalized image rays (..., 3) with unit z."""
    return homogeneous(p) @ K.K_inv.T


def backproject(p, Z, K: CameraIntrinsics):
    """Return ``Z * K^-1 p~``; works on single pixels or arrays (..., 2)."""
    Z = np.asarray(Z, dtype=float)
    if np.any(~(Z > 0)):
        raise GeometryError("depth must be positive")
    return normalize_points(p, K) * Z[..., None]


def project(P, K: CameraIntrinsics):
    P = np.asarray(P, dtype=float)
    if np.any(~(P[..., 2] > 0)):
        raise BehindCameraError("point at or behind the camera plane")
    return dehomogenize(P @ K.K.T)


def rotational_homography(K0: CameraIntrinsics, K1: CameraIntrinsics, Rc):
    """``K0 Rc K1^-1``: maps frame-1 pixels to frame-0 orientation."""
    return K0.K @ np.asarray(Rc, dtype=float) @ K1.K_inv


def essential_from_motion(Rc, Tc):
    """Essential matrix with ``x1^T E x0 = 0`` for camera motion ``(Rc, Tc)``.

    Under ``P0 = Rc P1 + Tc`` the rotation entering ``E = R [t]x`` is
    ``Rc^T`` (the frame-0 to frame-1 rotation) and ``t = Tc``.
    """
    Tc = np.asarray(Tc, dtype=float)
    if np.linalg.norm(Tc) < 1e-12:
        raise DegenerateTranslationError("essential matrix undefined for zero translation")
    return np.asarray(Rc, dtype=float).T @ skew(Tc)


def fundamental_from_essential(E, K0: CameraIntrinsics, K1: CameraIntrinsics):
    return K1.K_inv.T @ E @ K0.K_inv


def sampson_error(F, p0, p1, eps=0.0):
    """Squared Sampson error of correspondences under ``p1~^T F p0~ = 0``.

    Points are (..., 2) in the coordinate system ``F`` is expressed in.
    """
    x0 = homogeneous(p0)
    x1 = homogeneous(p1)
    Fx0 = x0 @ F.T
    Ftx1 = x1 @ F
    r = np.sum(x1 * Fx0, axis=-1)
    den = Fx0[..., 0] ** 2 + Fx0[..., 1] ** 2 + Ftx1[..., 0] ** 2 + Ftx1[..., 1] ** 2 + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        return r * r / den


PARALLAX_MIN_RAD = 1e-8


def triangulate_normalized(x0, x1, R, t, method="midpoint"):
    """Vectorised two-view triangulation in normalized coordinates.

    ``x0``, ``x1`` are (N, 3) rays with unit z, and ``P1 = R P0 + t``.
    Returns ``(X, ok_parallax)`` where X is (N, 3) in frame 0 and
    ``ok_parallax`` flags rays that are not parallel.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    d0 = x0
    d1 = x1 @ R          # R^T x1 as rows
    c1 = -R.T @ t
    cross = np.linalg.norm(np.cross(d0, d1), axis=1)
    sin_par = cross / (np.linalg.norm(d0, axis=1) * np.linalg.norm(d1, axis=1))
    ok = sin_par > PARALLAX_MIN_RAD
    if method == "midpoint":
        a = np.einsum("ij,ij->i", d0, d0)
        b = np.einsum("ij,ij->i", d0, d1)
        c = np.einsum("ij,ij->i", d1, d1)
        e = d0 @ c1
        f = d1 @ c1
        D = b * b - a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            l0 = (-c * e + b * f) / D
            l1 = (-b * e + a * f) / D
        X = 0.5 * (l0[:, None] * d0 + c1 + l1[:, None] * d1)
    elif method == "dlt":
        P1 = np.hstack([R, t[:, None]])
        A = np.empty((len(x0), 4, 4))
        A[:, 0] = np.array([-1.0, 0.0, 0.0, 0.0]) + x0[:, [0]] * np.array([0.0, 0.0, 1.0, 0.0])
        A[:, 1] = np.array([0.0, -1.0, 0.0, 0.0]) + x0[:, [1]] * np.array([0.0, 0.0, 1.0, 0.0])
        A[:, 2] = x1[:, [0]] * P1[2] - P1[0]
        A[:, 3] = x1[:, [1]] * P1[2] - P1[1]
        scale = np.linalg.norm(A, axis=2, keepdims=True)
        _, _, Vt = np.linalg.svd(A / scale)
        Xh = Vt[:, -1, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            X = Xh[:, :3] / Xh[:, 3:4]
    else:
        raise ValueError(f"unknown triangulation method {method!r}")
    return X, ok & np.all(np.isfinite(X), axis=1)
