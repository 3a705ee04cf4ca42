"""Cost-map thresholding, rigid instance extraction and the polar mask codec."""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .geometry import RigidTransform

INVALID_LABEL = -1
N_RAYS = 36
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class ThresholdConfig:
    t_epi: float = 1.0        # px^2
    t_hom: float = 1.0        # px^2
    t_pp3d: float = 0.05      # normalized scene-flow units
    t_depth: float = 0.15     # log depth
    min_instance_area: int = 50
    use_hom_instead_of_epi: bool = False

    def __post_init__(self):
        if min(self.t_epi, self.t_hom, self.t_pp3d, self.t_depth) <= 0:
            raise ValueError("thresholds must be positive")
        if self.min_instance_area < 1:
            raise ValueError("min_instance_area must be at least 1")

    def thresholds(self):
        return {"epi": self.t_epi, "hom": self.t_hom, "pp3d": self.t_pp3d, "depth": self.t_depth}


@dataclass
class InstanceInfo:
    id: int
    area: int
    centroid: tuple                            # (u, v) pixel coordinates
    transform: Optional[RigidTransform] = None
    scale: Optional[float] = None
    valid: bool = False


@dataclass
class SegmentationResult:
    background: np.ndarray                     # bool
    labels: np.ndarray                         # int32, 0 background, -1 invalid
    instances: list = field(default_factory=list)

    @property
    def n_instances(self):
        return len(self.instances)


def segment_moving(costs, cfg: ThresholdConfig):
    """Boolean moving mask: any available cost above its threshold.

    ``costs`` maps any of ``epi``, ``hom``, ``pp3d``, ``depth`` to (H, W)
    maps.  NaN compares false, so invalid pixels come out static.
    """
    use = dict(costs)
    if cfg.use_hom_instead_of_epi:
        use.pop("epi", None)
    elif "epi" in use:
        use.pop("hom", None)
    shapes = {np.shape(c) for c in use.values()}
    if len(shapes) > 1:
        raise ValueError(f"cost maps have different dimensions: {sorted(shapes)}")
    if not use:
        raise ValueError("no cost maps supplied")
    thr = cfg.thresholds()
    moving = np.zeros(next(iter(shapes)), dtype=bool)
    for name, c in use.items():
        with np.errstate(invalid="ignore"):
            moving |= np.asarray(c) > thr[name]
    return moving


def fill_unknown(moving, unknown):
    """Give no-evidence pixels the majority decision of their known 3x3 neighbours."""
    known = ~unknown
    votes = ndimage.uniform_filter((moving & known).astype(float), 3, mode="constant")
    support = ndimage.uniform_filter(known.astype(float), 3, mode="constant")
    out = moving.copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        out[unknown] = (votes[unknown] / support[unknown]) > 0.5
    return out


def connected_components(moving, min_area=50):
    """4-connected instance ids in raster order of each component's first pixel."""
    moving = np.asarray(moving, dtype=bool)
    lab, n = ndimage.label(moving, structure=_FOUR_CONNECTED)
    out = np.zeros(moving.shape, dtype=np.int32)
    if n == 0:
        return out
    areas = np.bincount(lab.ravel(), minlength=n + 1)
    ids, first = np.unique(lab.ravel(), return_index=True)
    keep = [(f, i) for i, f in zip(ids, first) if i > 0 and areas[i] >= min_area]
    remap = np.zeros(n + 1, dtype=np.int32)
    for new_id, (_, old) in enumerate(sorted(keep), start=1):
        remap[old] = new_id
    return remap[lab]


def instance_table(labels):
    out = []
    n = int(labels.max(initial=0))
    for i in range(1, n + 1):
        v, u = np.nonzero(labels == i)
        out.append(InstanceInfo(i, int(len(u)), (float(u.mean() + 0.5), float(v.mean() + 0.5))))
    return out


def build_segmentation(moving, cfg: ThresholdConfig, invalid=None):
    moving = np.asarray(moving, dtype=bool)
    if invalid is not None:
        moving = moving & ~invalid
    labels = connected_components(moving, cfg.min_instance_area)
    if invalid is not None:
        labels[invalid] = INVALID_LABEL
    return SegmentationResult(labels == 0, labels, instance_table(labels))


def resolve_stream_conflicts(background, labels):
    """Invalidate pixels where the background mask and the instance labels disagree."""
    background = np.asarray(background, dtype=bool)
    labels = np.asarray(labels)
    if background.shape != labels.shape:
        raise ValueError("background and labels differ in shape")
    out = labels.copy()
    conflict = ((labels > 0) & background) | ((labels == 0) & ~background)
    out[conflict] = INVALID_LABEL
    return out


# --------------------------------------------------------------------------- polar masks

@dataclass
class PolarMask:
    center: tuple            # (u, v)
    radii: np.ndarray        # (36,)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float)
        if self.radii.shape != (N_RAYS,) or np.any(~np.isfinite(self.radii)) or np.any(self.radii < 0):
            raise ValueError("radii must be 36 finite non-negative values")

    @property
    def angles(self):
        return 2 * np.pi * np.arange(N_RAYS) / N_RAYS


def polar_encode(mask, step=0.05):
    """Centroid plus, per ray, the distance at which the ray last leaves the mask.

    Pixels are treated as unit squares, so a ray is sampled every ``step``
    pixels and the farthest sample that lands on a mask pixel sets the radius.
    """
    mask = np.asarray(mask, dtype=bool)
    v, u = np.nonzero(mask)
    if len(u) == 0:
        raise ValueError("cannot encode an empty mask")
    H, W = mask.shape
    cu, cv = float(u.mean()) + 0.5, float(v.mean()) + 0.5
    a = 2 * np.pi * np.arange(N_RAYS) / N_RAYS
    t = np.arange(0.0, np.hypot(H, W), step)
    j = np.floor(cu + np.outer(np.cos(a), t)).astype(int)
    i = np.floor(cv + np.outer(np.sin(a), t)).astype(int)
    inside = (i >= 0) & (i < H) & (j >= 0) & (j < W)
    hit = np.zeros(inside.shape, dtype=bool)
    hit[inside] = mask[i[inside], j[inside]]
    last = np.where(hit.any(axis=1), hit.shape[1] - 1 - np.argmax(hit[:, ::-1], axis=1), -1)
    radii = np.where(last >= 0, t[np.maximum(last, 0)] + step, 0.0)
    if len(u) == 1:
        radii[:] = 0.0
    return PolarMask((cu, cv), radii)


def polar_decode(pm: PolarMask, shape):
    """Rasterize the 36-gon: pixel centres inside the star polygon around the centre."""
    H, W = shape
    cu, cv = pm.center
    if not (0 <= cu <= W and 0 <= cv <= H):
        raise ValueError("polar mask centre outside the image")
    out = np.zeros((H, W), dtype=bool)
    if not np.any(pm.radii > 0):
        return out
    a = pm.angles
    verts = np.stack([pm.radii * np.cos(a), pm.radii * np.sin(a)], axis=1)
    v, u = np.mgrid[0:H, 0:W]
    du = u + 0.5 - cu
    dv = v + 0.5 - cv
    theta = np.mod(np.arctan2(dv, du), 2 * np.pi)
    k = np.minimum((theta / (2 * np.pi / N_RAYS)).astype(int), N_RAYS - 1)
    A = verts[k]
    B = verts[(k + 1) % N_RAYS]
    # inside the triangle (centre, A, B): on the centre's side of edge AB
    e = B - A
    side_p = e[..., 0] * (dv - A[..., 1]) - e[..., 1] * (du - A[..., 0])
    side_c = e[..., 0] * (-A[..., 1]) - e[..., 1] * (-A[..., 0])
    inside = side_p * np.sign(side_c) >= -1e-9
    inside &= np.abs(side_c) > 0
    out[:] = inside | ((du == 0) & (dv == 0))
    return out


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union
