"""Synthetic two-frame scenes with exact ground truth.

Surfaces are analytic primitives (planes, convex quads, boxes, spheres) that
are ray cast at every pixel centre of frame 0, so each rendered pixel has an
exact 3D point.  That point is moved by its body's rigid motion and viewed
from the moved camera, giving flow, expansion and both depths with no
resampling error.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import RigidKitError
from .geometry import (CameraIntrinsics, RigidTransform, pixel_grid, project, rotation_about,
                       normalize_points)

logger = logging.getLogger(__name__)

_NO_HIT = np.inf


class SceneError(RigidKitError, ValueError):
    pass


# --------------------------------------------------------------------------- primitives

class Plane:
    """Infinite plane ``n . X = d``."""

    def __init__(self, normal, offset):
        self.normal = np.asarray(normal, dtype=float)
        self.offset = float(offset)

    def intersect(self, rays):
        den = rays @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.offset / den
        return np.where((np.abs(den) > 1e-12) & (t > 0), t, _NO_HIT)

    def transformed(self, rt: RigidTransform):
        n = rt.R @ self.normal
        return Plane(n, self.offset + n @ rt.T)


class Quad:
    """Planar convex polygon given by its corners in order."""

    def __init__(self, corners):
        self.corners = np.asarray(corners, dtype=float)
        c = self.corners
        n = np.cross(c[1] - c[0], c[2] - c[0])
        self.normal = n / np.linalg.norm(n)

    def intersect(self, rays):
        c = self.corners
        den = rays @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (c[0] @ self.normal) / den
        hit = (np.abs(den) > 1e-12) & (t > 0)
        q = rays * np.where(hit, t, 0.0)[:, None]
        inside = np.ones(len(rays), dtype=bool)
        for k in range(len(c)):
            a, b = c[k], c[(k + 1) % len(c)]
            s = np.cross(b - a, q - a) @ self.normal
            inside &= s >= -1e-12
        return np.where(hit & inside, t, _NO_HIT)

    def transformed(self, rt: RigidTransform):
        return Quad(rt.apply(self.corners))


class Sphere:
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def intersect(self, rays):
        a = np.einsum("ij,ij->i", rays, rays)
        b = -2.0 * rays @ self.center
        c = self.center @ self.center - self.radius ** 2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        return np.where((disc >= 0) & (t > 0), t, _NO_HIT)

    def transformed(self, rt: RigidTransform):
        return Sphere(rt.apply(self.center), self.radius)


def box_faces(center, size, yaw_deg=0.0, pitch_deg=0.0):
    """Six outward-facing quads of an oriented box."""
    R = rotation_about((0, 1, 0), yaw_deg) @ rotation_about((1, 0, 0), pitch_deg)
    h = np.asarray(size, dtype=float) / 2.0
    center = np.asarray(center, dtype=float)
    faces = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u, w = [a for a in range(3) if a != axis]
            pts = []
            for su, sw in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                p = np.zeros(3)
                p[axis] = sign * h[axis]
                p[u] = su * h[u]
                p[w] = sw * h[w]
                pts.append(p)
            pts = np.array(pts)
            n = np.zeros(3)
            n[axis] = sign
            if np.cross(pts[1] - pts[0], pts[2] - pts[0]) @ n < 0:
                pts = pts[::-1]
            faces.append(Quad(pts @ R.T + center))
    return faces


def build_primitives(geometry):
    """Geometry descriptor dict to a list of primitives."""
    kind = geometry.get("type")
    if kind == "plane":
        return [Plane(geometry["normal"], geometry["offset"])]
    if kind in ("patch", "quad"):
        return [Quad(geometry["corners"])]
    if kind == "box":
        return box_faces(geometry["center"], geometry["size"], geometry.get("yaw", 0.0),
                         geometry.get("pitch", 0.0))
    if kind == "sphere":
        return [Sphere(geometry["center"], geometry["radius"])]
    raise SceneError(f"unknown geometry type {kind!r}")


# --------------------------------------------------------------------------- scene description

@dataclass
class NoiseConfig:
    flow_sigma: float = 0.0
    expansion_sigma: float = 0.0
    prior_depth_model: str = "exact"   # exact | scaled | smooth-ramp | noisy
    prior_params: tuple = ()
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction <= 0.5:
            raise SceneError("outlier_fraction must lie in [0, 0.5]")
        if self.flow_sigma < 0 or self.expansion_sigma < 0:
            raise SceneError("noise sigmas must be non-negative")
        if self.prior_depth_model not in ("exact", "scaled", "smooth-ramp", "noisy"):
            raise SceneError(f"unknown prior depth model {self.prior_depth_model!r}")
        self.prior_params = tuple(float(p) for p in self.prior_params)

    def to_dict(self):
        return {"flow_sigma": self.flow_sigma, "expansion_sigma": self.expansion_sigma,
                "prior_depth_model": self.prior_depth_model, "prior_params": list(self.prior_params),
                "outlier_fraction": self.outlier_fraction, "seed": self.seed}


@dataclass
class Body:
    id: int
    geometry: list            # list of geometry descriptor dicts
    motion: RigidTransform = field(default_factory=RigidTransform)


@dataclass
class SceneDescription:
    width: int
    height: int
    K0: CameraIntrinsics
    K1: CameraIntrinsics
    camera_motion: RigidTransform
    background: list                       # geometry descriptors, id 0
    bodies: list = field(default_factory=list)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        ids = [b.id for b in self.bodies]
        if any(i <= 0 for i in ids) or len(set(ids)) != len(ids):
            raise SceneError("body ids must be unique and positive")
        if self.width <= 0 or self.height <= 0:
            raise SceneError("image dimensions must be positive")

    @classmethod
    def from_dict(cls, d):
        try:
            bodies = [Body(int(b["id"]), b["geometry"], RigidTransform.from_dict(b.get("motion", {"R": np.eye(3).tolist(), "T": [0, 0, 0]})))
                      for b in d.get("bodies", [])]
            return cls(int(d["width"]), int(d["height"]),
                       CameraIntrinsics.from_dict(d["K0"]), CameraIntrinsics.from_dict(d.get("K1", d["K0"])),
                       RigidTransform.from_dict(d["camera_motion"]), d["background"], bodies,
                       NoiseConfig(**d.get("noise", {})))
        except SceneError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"invalid scene description: {exc}") from None

    def to_dict(self):
        return {
            "width": self.width, "height": self.height,
            "K0": self.K0.to_dict(), "K1": self.K1.to_dict(),
            "camera_motion": self.camera_motion.to_dict(),
            "background": self.background,
            "bodies": [{"id": b.id, "geometry": b.geometry, "motion": b.motion.to_dict()} for b in self.bodies],
            "noise": self.noise.to_dict(),
        }


@dataclass
class GroundTruth:
    flow: np.ndarray          # (H, W, 2)
    expansion: np.ndarray     # (H, W)  Z1 / Z0
    Z0: np.ndarray            # (H, W)
    Z1: np.ndarray            # (H, W)  frame-1 depth of the point seen at each frame-0 pixel
    labels: np.ndarray        # (H, W) int, -1 where nothing was hit
    confidence: np.ndarray    # (H, W)
    occluded: np.ndarray      # (H, W) bool, frame-1 view blocked or out of frame
    ego: RigidTransform
    body_motions: dict        # id -> world-frame RigidTransform
    K0: CameraIntrinsics
    K1: CameraIntrinsics

    @property
    def valid(self):
        return self.labels >= 0

    def relative_motion(self, body_id):
        """Transform mapping frame-0 camera points of a segment to frame 1 (``P1 = R P0 + T``)."""
        to_cam1 = self.ego.inverse()
        if body_id == 0:
            return to_cam1
        return to_cam1.compose(self.body_motions[body_id])


# --------------------------------------------------------------------------- rendering

def _cast(prims_by_id, rays):
    depth = np.full(len(rays), np.inf)
    ids = np.full(len(rays), -1, dtype=np.int32)
    for body_id, prims in prims_by_id:
        for prim in prims:
            t = prim.intersect(rays)
            closer = t < depth
            depth[closer] = t[closer]
            ids[closer] = body_id
    return depth, ids


def render(scene: SceneDescription) -> GroundTruth:
    H, W = scene.height, scene.width
    groups = [(0, [p for g in scene.background for p in build_primitives(g)])]
    for b in scene.bodies:
        groups.append((b.id, [p for g in b.geometry for p in build_primitives(g)]))
    motions = {0: RigidTransform()}
    motions.update({b.id: b.motion for b in scene.bodies})

    p0 = pixel_grid(H, W).reshape(-1, 2)
    rays = normalize_points(p0, scene.K0)
    # rays have unit z, so the ray parameter is the depth
    Z0, ids = _cast(groups, rays)
    hit = ids >= 0
    if not hit.any():
        raise SceneError("no visible points in scene")

    X0 = rays * np.where(hit, Z0, 0.0)[:, None]
    X1w = X0.copy()
    for body_id, rt in motions.items():
        m = ids == body_id
        X1w[m] = rt.apply(X0[m])
    to_cam1 = scene.camera_motion.inverse()
    P1 = to_cam1.apply(X1w)
    if np.any(P1[hit, 2] <= 0):
        raise SceneError("scene point behind the camera in frame 1")

    flow = np.full((H * W, 2), np.nan)
    p1 = np.full((H * W, 2), np.nan)
    p1[hit] = project(P1[hit], scene.K1)
    flow[hit] = p1[hit] - p0[hit]
    Z1 = np.where(hit, P1[:, 2], np.nan)
    Z0 = np.where(hit, Z0, np.nan)

    # frame-1 visibility: ray cast the moved scene expressed in camera-1 coordinates
    groups1 = []
    for body_id, prims in groups:
        rt = to_cam1.compose(motions[body_id])
        groups1.append((body_id, [p.transformed(rt) for p in prims]))
    in_frame = hit & (p1[:, 0] >= 0) & (p1[:, 0] <= W) & (p1[:, 1] >= 0) & (p1[:, 1] <= H)
    occluded = hit & ~in_frame
    idx = np.flatnonzero(in_frame)
    if len(idx):
        d1, _ = _cast(groups1, normalize_points(p1[idx], scene.K1))
        occluded[idx] = d1 < Z1[idx] * (1.0 - 1e-6)

    return GroundTruth(
        flow=flow.reshape(H, W, 2),
        expansion=(Z1 / Z0).reshape(H, W),
        Z0=Z0.reshape(H, W),
        Z1=Z1.reshape(H, W),
        labels=ids.reshape(H, W),
        confidence=hit.astype(float).reshape(H, W),
        occluded=occluded.reshape(H, W),
        ego=scene.camera_motion,
        body_motions={b.id: b.motion for b in scene.bodies},
        K0=scene.K0, K1=scene.K1,
    )


# --------------------------------------------------------------------------- corruption

def corrupt(gt: GroundTruth, noise: NoiseConfig):
    """Noisy network-like inputs from ground truth.

    Returns a dict with ``flow``, ``expansion``, ``depth_prior`` and
    ``confidence``.  Outliers get confidence 0.4, other rendered pixels 0.9,
    empty pixels 0.
    """
    rng = np.random.default_rng(noise.seed)
    valid = gt.valid
    H, W = valid.shape
    flow = gt.flow.copy()
    expansion = gt.expansion.copy()
    if noise.flow_sigma > 0:
        flow[valid] += rng.normal(0.0, noise.flow_sigma, size=(int(valid.sum()), 2))
    if noise.expansion_sigma > 0:
        expansion[valid] *= np.exp(rng.normal(0.0, noise.expansion_sigma, size=int(valid.sum())))

    confidence = np.where(valid, 0.9, 0.0)
    idx = np.flatnonzero(valid.ravel())
    n_out = int(np.floor(noise.outlier_fraction * len(idx)))
    if n_out:
        out = rng.choice(idx, size=n_out, replace=False)
        f = flow.reshape(-1, 2)
        f[out] = rng.uniform(-20.0, 20.0, size=(n_out, 2))
        confidence.reshape(-1)[out] = 0.4

    model, params = noise.prior_depth_model, noise.prior_params
    if model == "exact":
        prior = gt.Z0.copy()
    elif model == "scaled":
        prior = gt.Z0 * params[0]
    elif model == "smooth-ramp":
        lo, hi = params
        ramp = np.linspace(lo, hi, W)[None, :]
        prior = gt.Z0 * ramp
    else:
        prior = gt.Z0 * np.exp(rng.normal(0.0, params[0], size=(H, W)))
    return {"flow": flow, "expansion": expansion, "depth_prior": prior, "confidence": confidence}


# --------------------------------------------------------------------------- canonical scenarios

SCENARIO_KINDS = ("general", "coplanar", "collinear", "zero_translation", "pure_rotation", "static")


def default_intrinsics(width=320, height=240, focal=300.0):
    return CameraIntrinsics(focal, focal, width / 2.0, height / 2.0)


def _background():
    # ground plane 1.5 below the camera and a back wall at depth 30
    return [{"type": "plane", "normal": [0.0, 1.0, 0.0], "offset": 1.5},
            {"type": "plane", "normal": [0.0, 0.0, 1.0], "offset": 30.0}]


def _about_center(R, center, T):
    """World-frame transform rotating by R about ``center`` then translating by T."""
    center = np.asarray(center, dtype=float)
    return RigidTransform(R, center - R @ center + np.asarray(T, dtype=float))


def make_degenerate_scenario(kind, seed=0, width=320, height=240, noise=None):
    """Canonical scene for one camera/object motion configuration.

    ``general``: transverse movers; ``coplanar``: mover translating inside its
    epipolar planes; ``collinear``: mover translating against the camera
    translation; ``zero_translation``: rotating camera with a small mover;
    ``pure_rotation``: rotating camera, static scene; ``static``: translating
    camera, static scene.
    """
    if kind not in SCENARIO_KINDS:
        raise SceneError(f"unknown scenario kind {kind!r}")
    rng = np.random.default_rng(seed)
    jit = lambda s: rng.uniform(-s, s)
    K = default_intrinsics(width, height)
    I3 = np.eye(3)
    bodies = []

    if kind in ("general", "static"):
        Rc = rotation_about((0, 1, 0), 1.0 + jit(0.5)) @ rotation_about((1, 0, 0), jit(0.5))
        cam = RigidTransform(Rc, [1.0 + jit(0.1), jit(0.05), 0.2 + jit(0.05)])
        if kind == "general":
            c1 = [-2.2, -0.2, 10.0]
            bodies.append(Body(1, [{"type": "box", "center": c1, "size": [1.6, 1.4, 1.2], "yaw": 30.0}],
                               _about_center(rotation_about((0, 1, 0), 3.0 + jit(1.0)), c1,
                                             [jit(0.1), -0.8 + jit(0.1), 0.0])))
            c2 = [2.0, 0.2, 9.0]
            bodies.append(Body(2, [{"type": "sphere", "center": c2, "radius": 0.9}],
                               RigidTransform(I3, [0.3 + jit(0.1), 0.7 + jit(0.1), -0.5 + jit(0.1)])))
    elif kind == "coplanar":
        cam = RigidTransform(I3, [1.0, 0.0, 0.0])
        c = [-1.0 + jit(0.2), 0.0, 8.0]
        # thin box straddling the horizon; moving in depth keeps it (almost) on its epipolar lines
        bodies.append(Body(1, [{"type": "box", "center": c, "size": [1.6, 0.5, 0.8], "yaw": 30.0}],
                           RigidTransform(I3, [-0.5 + jit(0.1), 0.0, 1.0])))
    elif kind == "collinear":
        cam = RigidTransform(I3, [1.0, 0.0, 0.0])
        c = [-1.5 + jit(0.2), 0.3, 9.0]
        bodies.append(Body(1, [{"type": "box", "center": c, "size": [2.0, 1.2, 1.4], "yaw": 25.0}],
                           RigidTransform(I3, [-1.0 + jit(0.1), 0.0, 0.0])))
    else:
        Rc = rotation_about((0, 1, 0), 2.0 + jit(1.0)) @ rotation_about((1, 0, 0), 1.0 + jit(0.5))
        cam = RigidTransform(Rc, [0.0, 0.0, 0.0])
        if kind == "zero_translation":
            c = [1.5, 0.0, 12.0]
            bodies.append(Body(1, [{"type": "box", "center": c, "size": [1.2, 1.0, 1.0], "yaw": 20.0}],
                               RigidTransform(I3, [0.5 + jit(0.1), -0.3 + jit(0.1), 0.0])))
    return SceneDescription(width, height, K, K, cam, _background(), bodies, noise or NoiseConfig(seed=seed))
