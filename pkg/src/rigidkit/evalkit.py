"""Segmentation and scene-flow scores."""
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InsufficientDataError

MATCH_IOU = 0.5
OUTLIER_PX = 3.0
OUTLIER_REL = 0.05


@dataclass
class SegScores:
    bg_iou: float
    obj_fmeasure: float
    precision: float
    recall: float
    instance_ious: list = field(default_factory=list)   # per ground-truth instance, 0 if unmatched


@dataclass
class FlowScores:
    d1: float
    d2: float
    fl: float
    sf: float
    splits: dict = field(default_factory=dict)


def _match_instances(pred, gt, valid):
    """Greedy one-to-one matching by descending IoU; returns {gt_id: (pred_id, iou)}."""
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    pid = np.unique(p[p > 0])
    gid = np.unique(g[g > 0])
    if len(pid) == 0 or len(gid) == 0:
        return {}, pid, gid
    pi = np.searchsorted(pid, p)
    gi = np.searchsorted(gid, g)
    both = (p > 0) & (g > 0)
    inter = np.zeros((len(gid), len(pid)))
    np.add.at(inter, (gi[both], pi[both]), 1)
    ga = np.array([np.count_nonzero(g == i) for i in gid], dtype=float)
    pa = np.array([np.count_nonzero(p == i) for i in pid], dtype=float)
    iou = inter / (ga[:, None] + pa[None, :] - inter)
    pairs = sorted(((iou[a, b], a, b) for a in range(len(gid)) for b in range(len(pid))),
                   key=lambda t: (-t[0], t[1], t[2]))
    used_g, used_p, out = set(), set(), {}
    for v, a, b in pairs:
        if v < MATCH_IOU:
            break
        if a in used_g or b in used_p:
            continue
        used_g.add(a)
        used_p.add(b)
        out[int(gid[a])] = (int(pid[b]), float(v))
    return out, pid, gid


def score_segmentation(pred_labels, gt_labels):
    """Background IoU and instance F-measure; pixels negative in either map are ignored."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"label maps differ in shape: {pred.shape} vs {gt.shape}")
    valid = (pred >= 0) & (gt >= 0)
    pb = (pred == 0) & valid
    gb = (gt == 0) & valid
    union = np.count_nonzero(pb | gb)
    bg_iou = 1.0 if union == 0 else np.count_nonzero(pb & gb) / union
    matches, pid, gid = _match_instances(pred, gt, valid)
    tp = len(matches)
    if len(pid) == 0 and len(gid) == 0:
        P = R = F = 1.0
    else:
        P = tp / len(pid) if len(pid) else 0.0
        R = tp / len(gid) if len(gid) else 0.0
        F = 0.0 if P + R == 0 else 2 * P * R / (P + R)
    ious = [matches.get(int(i), (0, 0.0))[1] for i in gid]
    return SegScores(float(bg_iou), float(F), float(P), float(R), ious)


def kitti_outliers(err, mag):
    return (err > OUTLIER_PX) & (err > OUTLIER_REL * mag)


def score_flow(pred_flow, gt_flow, pred_Z0, pred_Z1, gt_Z0, gt_Z1, valid=None, bf=1.0, fg_mask=None):
    """KITTI D1/D2/Fl/SF outlier percentages with disparity ``bf / Z``."""
    pred_flow = np.asarray(pred_flow, dtype=float)
    gt_flow = np.asarray(gt_flow, dtype=float)
    arrays = [np.asarray(a, dtype=float) for a in (pred_Z0, pred_Z1, gt_Z0, gt_Z1)]
    shape = gt_flow.shape[:2]
    if pred_flow.shape != gt_flow.shape or any(a.shape != shape for a in arrays):
        raise ValueError("prediction and ground truth dimensions differ")
    pZ0, pZ1, gZ0, gZ1 = arrays
    ok = np.all(np.isfinite(gt_flow), axis=-1) & (gZ0 > 0) & (gZ1 > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    if not ok.any():
        raise InsufficientDataError("no valid ground-truth pixels")
    with np.errstate(divide="ignore", invalid="ignore"):
        gd0, gd1 = bf / gZ0, bf / gZ1
        e1 = np.abs(bf / pZ0 - gd0)
        e2 = np.abs(bf / pZ1 - gd1)
    efl = np.linalg.norm(pred_flow - gt_flow, axis=-1)
    # missing predictions count as errors
    o1 = ~(np.isfinite(e1)) | kitti_outliers(e1, gd0)
    o2 = ~(np.isfinite(e2)) | kitti_outliers(e2, gd1)
    ofl = ~(np.isfinite(efl)) | kitti_outliers(efl, np.linalg.norm(gt_flow, axis=-1))
    osf = o1 | o2 | ofl

    def pct(o, m):
        n = np.count_nonzero(m)
        return float(100.0 * np.count_nonzero(o & m) / n) if n else float("nan")

    splits = {}
    if fg_mask is not None:
        fg = np.asarray(fg_mask, dtype=bool)
        for name, m in (("bg", ok & ~fg), ("fg", ok & fg)):
            splits[name] = {k: pct(o, m) for k, o in (("d1", o1), ("d2", o2), ("fl", ofl), ("sf", osf))}
    return FlowScores(pct(o1, ok), pct(o2, ok), pct(ofl, ok), pct(osf, ok), splits)


def median_scale_align(pred_Z, gt_Z, validity=None):
    pred_Z = np.asarray(pred_Z, dtype=float)
    gt_Z = np.asarray(gt_Z, dtype=float)
    ok = np.isfinite(pred_Z) & np.isfinite(gt_Z)
    if validity is not None:
        ok &= np.asarray(validity, dtype=bool)
    if not ok.any():
        raise InsufficientDataError("no valid pixels for scale alignment")
    mp = float(np.median(pred_Z[ok]))
    if mp == 0:
        raise ValueError("median of the prediction is zero")
    k = float(np.median(gt_Z[ok])) / mp
    return pred_Z if k == 1.0 else pred_Z * k


CSV_FIELDS = ("bg_iou", "obj_fmeasure", "precision", "recall", "d1", "d2", "fl", "sf")


def csv_header():
    return ",".join(CSV_FIELDS)


def csv_row(seg: SegScores = None, flow: FlowScores = None):
    vals = {}
    if seg is not None:
        vals.update(asdict(seg))
    if flow is not None:
        vals.update(asdict(flow))
    return ",".join(repr(float(vals[k])) if k in vals else "" for k in CSV_FIELDS)
