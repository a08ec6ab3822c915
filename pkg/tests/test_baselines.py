import math

import numpy as np
import pytest
from scipy import ndimage

from synstitch import baselines as bl
from synstitch import geometry as geo
from synstitch import metrics as mt
from synstitch import phantomgen as pg

GEN = dict(t=(-8.0, 8.0), theta=(-math.pi / 24, math.pi / 24), s=(0.9, 1.1))
FAST = bl.IntensityConfig(n_starts=2, iterations=80)


def smooth_image(seed, n=48, sigma=3.0, window=12.0):
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((n, n)), sigma)
    img = (img - img.min()) / (img.max() - img.min())
    ys, xs = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    return img * np.exp(-((xs - c) ** 2 + (ys - c) ** 2) / (2 * window**2))


def textured_image(seed, n=64):
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((n, n)), 1.5)
    return (img - img.min()) / (img.max() - img.min())


def corr(pm, pf):
    return [bl.Correspondence(tuple(a), tuple(b), 0.0) for a, b in zip(pm, pf)]


# ---------------------------------------------------------------- intensity --

def test_intensity_identity_pair():
    img = smooth_image(0)
    a = bl.intensity_register(img, img, "mse", FAST)
    assert abs(a.params["tx"]) < 0.5 and abs(a.params["ty"]) < 0.5 and abs(a.params["theta"]) < 0.01


def test_intensity_recovers_translation_full_frame():
    img = smooth_image(1)
    c = geo.image_center(img.shape)
    fixed = geo.warp(img, geo.params_to_matrix(dict(tx=4.0), c))
    # exhaustive 1-px grid search oracle agrees on the optimum
    costs = {(dx, dy): mt.mse(geo.warp(img, geo.params_to_matrix(dict(tx=dx, ty=dy), c)), fixed)
             for dx in range(-6, 7) for dy in range(-6, 7)}
    assert min(costs, key=costs.get) == (4, 0)
    for metric in ("mse", "ncc"):
        a = bl.intensity_register(img, fixed, metric, FAST)
        assert abs(a.params["tx"] - 4.0) < 0.5 and abs(a.params["ty"]) < 0.5


def test_intensity_never_worse_than_identity():
    rng = np.random.default_rng(2)
    img = smooth_image(2)
    for _ in range(2):
        fixed = smooth_image(int(rng.integers(100)))
        a = bl.intensity_register(img, fixed, "mse", bl.IntensityConfig(n_starts=2, iterations=20))
        assert mt.mse(geo.warp(img, a), fixed) <= mt.mse(img, fixed) + 1e-12


def test_intensity_fov_dominance_on_sector_pairs():
    """Aligned sectors, content moved by >= 4 px: the full-canvas objective keeps the sectors together."""
    subs = pg.generate_cohort(2, 3, 48, 3)
    pairs = pg.make_content_pairs(subs, 2, GEN, np.random.default_rng(0), min_shift=4.0)
    for p in pairs:
        gt = p["gt_affine"].params
        assert math.hypot(gt["tx"], gt["ty"]) >= 4.0
        a = bl.intensity_register(p["moving"], p["fixed"], "mse", FAST)
        assert math.hypot(a.params["tx"], a.params["ty"]) < 1.0


def test_intensity_bad_metric():
    with pytest.raises(ValueError):
        bl.intensity_register(np.zeros((8, 8)), np.zeros((8, 8)), "mi")


# ------------------------------------------------------------------ corners --

def test_flat_image_has_no_corners():
    with pytest.raises(bl.InsufficientFeaturesError):
        bl.detect_corners(np.full((32, 32), 0.5))


def test_square_corners():
    img = np.zeros((64, 64))
    img[20:40, 20:40] = 1.0
    kps = bl.detect_corners(img, k=4)
    expected = np.array([[19.5, 19.5], [39.5, 19.5], [19.5, 39.5], [39.5, 39.5]])
    for e in expected:
        assert np.abs(kps - e).max(axis=1).min() <= 1.0
    # brute-force argmax of the response lands on a square corner too
    r = bl.harris_response(img)
    y, x = np.unravel_index(np.argmax(r), r.shape)
    assert np.abs(expected - [x, y]).max(axis=1).min() <= 1.0


def test_corner_count_respects_k_and_minimum():
    img = textured_image(0)
    for k in (4, 10, 50):
        assert len(bl.detect_corners(img, k=k)) <= k
    with pytest.raises(ValueError):
        bl.detect_corners(img, k=3)


def test_mask_edges_suppresses_sector_boundary():
    s = pg.gen_subject(0, 1, 64)
    eroded = ndimage.binary_erosion(s.fov_mask.astype(bool), iterations=2)
    kps = bl.detect_corners(s.frames[0], k=50, mask_edges=True).astype(int)
    assert eroded[kps[:, 1], kps[:, 0]].all()
    near_edge = ~eroded[tuple(bl.detect_corners(s.frames[0], k=50).astype(int)[:, ::-1].T)]
    assert near_edge.any()


# ----------------------------------------------------------------- matching --

def test_identical_images_match_themselves():
    img = textured_image(1)
    kps = bl.detect_corners(img, k=40)
    m = bl.match_descriptors(kps, kps, img, img)
    assert len(m) == len(kps)
    assert all(c.p_moving == c.p_fixed for c in m)


def test_translation_matches():
    img = textured_image(2)
    shifted = np.zeros_like(img)
    shifted[:, 5:] = img[:, :-5]
    ka = bl.detect_corners(img, k=60)
    kb = bl.detect_corners(shifted, k=60)
    m = bl.match_descriptors(ka, kb, img, shifted)
    assert len(m) >= 10
    d = np.array([np.subtract(c.p_fixed, c.p_moving) for c in m])
    good = np.abs(d - [5, 0]).max(axis=1) <= 1.0
    assert good.mean() >= 0.9


def test_empty_keypoints_give_no_matches():
    img = textured_image(3)
    assert bl.match_descriptors(np.zeros((0, 2)), bl.detect_corners(img, 10), img, img) == []


# ------------------------------------------------------------ least squares --

def test_lstsq_exact_and_identity():
    rng = np.random.default_rng(0)
    a = geo.params_to_matrix(dict(tx=3, ty=-2, theta=0.2, sx=1.1, sy=0.9, shear=0.05), (16, 16))
    pm = rng.uniform(0, 32, (3, 2))
    est = bl.lstsq_affine(corr(pm, a.apply(pm)))
    np.testing.assert_allclose(est.matrix, a.matrix, atol=1e-9)
    pm = rng.uniform(0, 32, (10, 2))
    np.testing.assert_allclose(bl.lstsq_affine(corr(pm, pm)).matrix, np.eye(3), atol=1e-12)


def test_lstsq_noisy():
    rng = np.random.default_rng(1)
    a = geo.params_to_matrix(dict(tx=1, ty=2, theta=-0.1, sx=1.05, sy=1.05), (16, 16))
    pm = rng.uniform(0, 64, (50, 2))
    pf = a.apply(pm) + rng.normal(0, 0.5, (50, 2))
    est = bl.lstsq_affine(corr(pm, pf))
    rms = math.sqrt(np.mean(np.sum((est.apply(pm) - pf) ** 2, axis=1)))
    assert rms <= 1.0


def test_lstsq_degenerate():
    pm = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [5.0, 5.0]])
    with pytest.raises(bl.EstimationFailedError):
        bl.lstsq_affine(corr(pm, pm))
    with pytest.raises(bl.EstimationFailedError):
        bl.lstsq_affine(corr(pm[:2], pm[:2]))


# ------------------------------------------------------------------- ransac --

def test_ransac_three_exact_points():
    a = geo.params_to_matrix(dict(tx=-4, ty=1, theta=0.3, sx=0.9, sy=1.2), (10, 10))
    pm = np.array([[1.0, 2.0], [20.0, 5.0], [7.0, 18.0]])
    est = bl.ransac_affine(corr(pm, a.apply(pm)), n_iter=10)
    np.testing.assert_allclose(est.matrix, a.matrix, atol=1e-9)


def test_ransac_collinear_and_too_few():
    pm = np.stack([np.arange(6.0), 2 * np.arange(6.0)], axis=1)
    with pytest.raises(bl.EstimationFailedError):
        bl.ransac_affine(corr(pm, pm), n_iter=20)
    with pytest.raises(bl.EstimationFailedError):
        bl.ransac_affine(corr(pm[:2], pm[:2]))


def test_ransac_deterministic_and_maximal():
    rng = np.random.default_rng(3)
    a = geo.params_to_matrix(dict(tx=2, ty=3, theta=0.1), (32, 32))
    pm = rng.uniform(0, 64, (25, 2))
    pf = a.apply(pm)
    pf[:8] = rng.uniform(0, 64, (8, 2))
    c = corr(pm, pf)
    m1 = bl.ransac_affine(c, 200, rng=np.random.default_rng(5))
    m2 = bl.ransac_affine(c, 200, rng=np.random.default_rng(5))
    assert m1.matrix.tobytes() == m2.matrix.tobytes()
    # no sampled candidate has more inliers than the returned model
    best = 0
    sample_rng = np.random.default_rng(5)
    for _ in range(200):
        idx = sample_rng.choice(25, 3, replace=False)
        try:
            m = np.eye(3)
            m[:2, :] = np.linalg.solve(np.hstack([pm[idx], np.ones((3, 1))]), pf[idx]).T
        except np.linalg.LinAlgError:
            continue
        best = max(best, int((np.linalg.norm(pm @ m[:2, :2].T + m[:2, 2] - pf, axis=1) <= 2.0).sum()))
    got = int((np.linalg.norm(m1.apply(pm) - pf, axis=1) <= 2.0).sum())
    assert got >= best


# ------------------------------------------------------------------ methods --

def test_feature_pipeline_textured_warp_only():
    ok = 0
    for trial in range(50):
        rng = np.random.default_rng(trial)
        img = textured_image(100 + trial)
        a = geo.sample_affine(GEN, rng, geo.image_center(img.shape))
        est = bl.FeatureMethod(seed=trial).register(img, geo.warp(img, a))
        kps = rng.uniform(16, 48, (10, 2))
        ok += mt.keypoint_rmse(kps, a.apply(kps), est) <= 2.0
    assert ok >= 40


def test_feature_method_falls_back_to_identity():
    flat = np.full((32, 32), 0.3)
    a = bl.FeatureMethod().register(flat, flat)
    assert np.array_equal(a.matrix, np.eye(3))


def test_identity_method():
    a = bl.IdentityMethod().register(np.zeros((16, 16)), np.zeros((16, 16)))
    assert np.array_equal(a.matrix, np.eye(3)) and a.center == (7.5, 7.5)
