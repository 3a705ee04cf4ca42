from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull
from matplotlib.path import Path as MplPath

from rigidkit.costmaps import MotionContext, compute_cost_maps
from rigidkit.egomotion import estimate_egomotion_ransac, sample_correspondences
from rigidkit.segment import (INVALID_LABEL, N_RAYS, PolarMask, ThresholdConfig, build_segmentation,
                              connected_components, fill_unknown, mask_iou, polar_decode, polar_encode,
                              resolve_stream_conflicts, segment_moving)

from conftest import scenario


def bfs_components(mask, min_area):
    """Reference labelling: 4-connected flood fill in raster order."""
    H, W = mask.shape
    out = np.zeros((H, W), dtype=np.int32)
    seen = np.zeros_like(mask, dtype=bool)
    nxt = 1
    for i in range(H):
        for j in range(W):
            if mask[i, j] and not seen[i, j]:
                comp, q = [], deque([(i, j)])
                seen[i, j] = True
                while q:
                    a, b = q.popleft()
                    comp.append((a, b))
                    for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        c, d = a + da, b + db
                        if 0 <= c < H and 0 <= d < W and mask[c, d] and not seen[c, d]:
                            seen[c, d] = True
                            q.append((c, d))
                if len(comp) >= min_area:
                    for a, b in comp:
                        out[a, b] = nxt
                    nxt += 1
    return out


def test_threshold_config_validation():
    with pytest.raises(ValueError):
        ThresholdConfig(t_epi=0)
    with pytest.raises(ValueError):
        ThresholdConfig(min_instance_area=0)


def test_all_zero_costs_are_static():
    z = np.zeros((10, 12))
    assert not segment_moving({"epi": z, "pp3d": z, "depth": z}, ThresholdConfig()).any()


def test_or_fusion_and_nan_is_no_evidence():
    cfg = ThresholdConfig()
    epi = np.array([[0.0, 2.0, np.nan, 0.0]])
    pp3d = np.array([[0.0, 0.0, np.nan, 0.1]])
    depth = np.array([[np.nan, 0.0, np.nan, 0.0]])
    m = segment_moving({"epi": epi, "pp3d": pp3d, "depth": depth}, cfg)
    assert m.tolist() == [[False, True, False, True]]


def test_homography_switch():
    hom = np.array([[5.0, 0.0]])
    epi = np.array([[0.0, 5.0]])
    assert segment_moving({"hom": hom, "epi": epi}, ThresholdConfig()).tolist() == [[False, True]]
    cfg = ThresholdConfig(use_hom_instead_of_epi=True)
    assert segment_moving({"hom": hom, "epi": epi}, cfg).tolist() == [[True, False]]


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        segment_moving({"epi": np.zeros((3, 3)), "depth": np.zeros((3, 4))}, ThresholdConfig())


cost_maps = st.integers(0, 2 ** 31).map(lambda s: np.random.default_rng(s)).map(
    lambda r: {k: np.where(r.random((8, 9)) < 0.1, np.nan, r.exponential(s, (8, 9)))
               for k, s in (("epi", 1.0), ("pp3d", 0.05), ("depth", 0.15))})


@settings(max_examples=60, deadline=None)
@given(cost_maps, st.floats(1.0, 5.0), st.sampled_from(["t_epi", "t_pp3d", "t_depth"]))
def test_raising_thresholds_never_grows_mask(costs, factor, which):
    base = ThresholdConfig()
    raised = ThresholdConfig(**{**base.__dict__, which: getattr(base, which) * factor})
    assert not np.any(segment_moving(costs, raised) & ~segment_moving(costs, base))


@settings(max_examples=30, deadline=None)
@given(cost_maps, st.integers(0, 2 ** 31))
def test_segment_moving_is_pointwise(costs, seed):
    perm = np.random.default_rng(seed).permutation(72)
    shuffled = {k: v.ravel()[perm].reshape(8, 9) for k, v in costs.items()}
    cfg = ThresholdConfig()
    assert np.array_equal(segment_moving(shuffled, cfg).ravel(), segment_moving(costs, cfg).ravel()[perm])


def test_two_squares():
    m = np.zeros((30, 30), dtype=bool)
    m[2:12, 2:12] = True
    m[15:25, 18:28] = True
    lab = connected_components(m, min_area=50)
    assert sorted(np.unique(lab)) == [0, 1, 2]
    assert np.count_nonzero(lab == 1) == 100 and np.count_nonzero(lab == 2) == 100


def test_small_component_merged():
    m = np.zeros((20, 20), dtype=bool)
    m[2:6, 2:6] = True
    assert not connected_components(m, min_area=50).any()


def test_diagonal_touch_is_not_connected():
    m = np.zeros((4, 4), dtype=bool)
    m[0, 0] = m[1, 1] = True
    assert sorted(np.unique(connected_components(m, 1))) == [0, 1, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.2, 0.7), st.integers(1, 8))
def test_components_match_flood_fill(seed, density, min_area):
    m = np.random.default_rng(seed).random((25, 31)) < density
    lab = connected_components(m, min_area)
    assert np.array_equal(lab, bfs_components(m, min_area))
    n = lab.max()
    assert set(np.unique(lab)) == set(range(n + 1)) or n == 0


def test_instance_ious_on_two_mover_scene():
    gt = scenario("general")
    lab = connected_components(gt.labels > 0, 50)
    for i in (1, 2):
        best = max(mask_iou(lab == j, gt.labels == i) for j in range(1, lab.max() + 1))
        assert best >= 0.9


def _est_costs(kind):
    gt = scenario(kind)
    est = estimate_egomotion_ransac(sample_correspondences(gt.flow, gt.confidence, 1000, 0), gt.K0, gt.K1)
    costs, _ = compute_cost_maps(gt.flow, gt.expansion, gt.Z0, MotionContext.from_estimate(est, gt.K0, gt.K1),
                                 gt.confidence)
    return gt, costs


def test_general_mover_mask_iou():
    gt, costs = _est_costs("general")
    assert mask_iou(segment_moving(costs, ThresholdConfig()), gt.labels > 0) >= 0.95


def test_collinear_needs_depth_contrast():
    gt, costs = _est_costs("collinear")
    cfg = ThresholdConfig()
    truth = gt.labels > 0
    assert mask_iou(segment_moving({"epi": costs["epi"]}, cfg), truth) < 0.1
    assert mask_iou(segment_moving(costs, cfg), truth) >= 0.9


def test_build_segmentation_accounts_for_every_pixel():
    m = np.zeros((20, 20), dtype=bool)
    m[2:12, 2:12] = True
    m[15:17, 15:17] = True
    invalid = np.zeros_like(m)
    invalid[0, :] = True
    seg = build_segmentation(m, ThresholdConfig(min_instance_area=20), invalid)
    areas = sum(i.area for i in seg.instances)
    assert areas + seg.background.sum() + np.count_nonzero(seg.labels == INVALID_LABEL) == 400
    assert seg.n_instances == 1 and seg.instances[0].area == 100
    assert np.array_equal(seg.labels > 0, ~(seg.background | invalid))


def test_fill_unknown_majority():
    m = np.zeros((5, 5), dtype=bool)
    m[:, :3] = True
    unknown = np.zeros_like(m)
    unknown[2, 1] = unknown[2, 3] = unknown[2, 4] = True
    f = fill_unknown(m, unknown)
    assert f[2, 1] and not f[2, 4]


def test_resolve_stream_conflicts():
    labels = np.array([[0, 0, 1, 1], [0, 2, 2, -1]])
    bg = labels == 0
    assert np.array_equal(resolve_stream_conflicts(bg, labels), labels)
    bg2 = bg.copy()
    bg2[0, 2] = True
    bg2[1, 0] = False
    out = resolve_stream_conflicts(bg2, labels)
    assert out[0, 2] == INVALID_LABEL and out[1, 0] == INVALID_LABEL
    assert np.array_equal(np.delete(out.ravel(), [2, 4]), np.delete(labels.ravel(), [2, 4]))


def test_resolve_conflicts_only_in_band():
    labels = np.zeros((40, 40), dtype=np.int32)
    labels[10:30, 10:30] = 1
    bg = np.ones((40, 40), dtype=bool)
    bg[12:28, 12:28] = False          # background stream claims a 2 px band of the instance
    out = resolve_stream_conflicts(bg, labels)
    band = (labels == 1) & bg
    assert np.all(out[band] == INVALID_LABEL)
    assert np.array_equal(out[~band], labels[~band])


def test_polar_disk():
    v, u = np.mgrid[0:101, 0:101]
    disk = (u - 50) ** 2 + (v - 50) ** 2 <= 30 ** 2
    pm = polar_encode(disk)
    assert np.allclose(pm.radii, 30, atol=1.0)
    assert np.allclose(pm.center, (50.5, 50.5))


def test_polar_single_pixel():
    m = np.zeros((10, 10), dtype=bool)
    m[4, 6] = True
    pm = polar_encode(m)
    assert np.all(pm.radii == 0)
    assert polar_decode(pm, m.shape).sum() <= 1


def test_polar_errors():
    with pytest.raises(ValueError):
        polar_encode(np.zeros((5, 5), dtype=bool))
    with pytest.raises(ValueError):
        PolarMask((1.0, 1.0), np.ones(35))
    with pytest.raises(ValueError):
        PolarMask((1.0, 1.0), -np.ones(N_RAYS))
    with pytest.raises(ValueError):
        polar_decode(PolarMask((50.0, 5.0), np.ones(N_RAYS)), (10, 10))
    assert not polar_decode(PolarMask((5.0, 5.0), np.zeros(N_RAYS)), (10, 10)).any()


def random_convex_mask(rng, shape=(96, 96)):
    """Pixel centres inside a random convex polygon (independent rasterizer).

    Vertices sit on a jittered ellipse with semi-axis 15 to 34 px and aspect
    ratio 0.6 to 1, so the shapes are blobs rather than slivers.
    """
    c = rng.uniform(36, 60, 2)
    R, aspect, rot = rng.uniform(15, 34), rng.uniform(0.6, 1.0), rng.uniform(0, np.pi)
    th = np.sort(rng.uniform(0, 2 * np.pi, rng.integers(8, 17)))
    r = R * rng.uniform(0.8, 1.0, len(th))
    xy = np.c_[r * np.cos(th), aspect * r * np.sin(th)]
    rm = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
    pts = c + xy @ rm.T
    v, u = np.mgrid[0:shape[0], 0:shape[1]]
    centres = np.c_[u.ravel() + 0.5, v.ravel() + 0.5]
    return MplPath(pts[ConvexHull(pts).vertices]).contains_points(centres).reshape(shape)


@pytest.mark.parametrize("seed", range(100))
def test_polar_roundtrip_convex(seed):
    m = random_convex_mask(np.random.default_rng(seed))
    assert mask_iou(m, polar_decode(polar_encode(m), m.shape)) >= 0.95


def _polygon(pm):
    a = pm.angles
    return np.c_[pm.center[0] + pm.radii * np.cos(a), pm.center[1] + pm.radii * np.sin(a)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_polar_decode_matches_polygon_and_is_star_convex(seed):
    rng = np.random.default_rng(seed)
    pm = PolarMask(tuple(rng.uniform(20, 44, 2)), rng.uniform(0.5, 20, N_RAYS))
    m = polar_decode(pm, (64, 64))
    poly = MplPath(_polygon(pm))
    v, u = np.mgrid[0:64, 0:64]
    centres = np.c_[u.ravel() + 0.5, v.ravel() + 0.5]
    ref = poly.contains_points(centres).reshape(m.shape)
    # boundary ties may go either way
    assert np.count_nonzero(ref != m) <= 0.02 * max(ref.sum(), 1) + 2
    c = np.asarray(pm.center)
    pts = centres[m.ravel()]
    for s in np.linspace(0.0, 0.98, 12):
        assert np.all(poly.contains_points(c + s * (pts - c), radius=1e-6) |
                      poly.contains_points(c + s * (pts - c), radius=-1e-6))
