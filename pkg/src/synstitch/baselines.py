"""Classical registration stand-ins: multi-start intensity optimization and corners + RANSAC."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .metrics import UndefinedMetricError, ncc

log = logging.getLogger(__name__)


class InsufficientFeaturesError(RuntimeError):
    pass


class EstimationFailedError(RuntimeError):
    pass


@dataclass
class Correspondence:
    p_moving: tuple
    p_fixed: tuple
    score: float


# ---------------------------------------------------------------- intensity --

PARAM_ORDER = ("tx", "ty", "theta", "sx", "sy", "shear")
FD_STEPS = np.array([0.5, 0.5, 0.01, 0.01, 0.01, 0.01])


@dataclass
class IntensityConfig:
    n_starts: int = 8
    iterations: int = 200
    seed: int = 0
    start_ranges: dict = field(default_factory=lambda: dict(
        t=(-8.0, 8.0), theta=(-math.pi / 24, math.pi / 24), s=(0.9, 1.1)))
    step0: float = 1.0
    min_step: float = 1e-3


def _vec_to_affine(v, center):
    p = dict(zip(PARAM_ORDER, v))
    p["sx"] = max(p["sx"], 0.2)
    p["sy"] = max(p["sy"], 0.2)
    return geo.params_to_matrix(p, center)


def _cost_fn(moving, fixed, metric, center):
    fixed = np.asarray(fixed, dtype=np.float64)
    m_fix = geo.threshold_mask(fixed)
    m_mov = geo.threshold_mask(moving)

    def cost(v):
        a = _vec_to_affine(v, center)
        w = geo.warp(moving, a)
        if metric == "mse":
            # full canvas == FOV union, background is zero in both
            return float(np.mean((w - fixed) ** 2))
        union = m_fix | geo.warp_mask(m_mov, a)
        try:
            return -ncc(w, fixed, union)
        except UndefinedMetricError:
            return 1.0
    return cost


def _descend(cost, v0, cfg):
    """Normalized gradient descent in FD-step units with backtracking."""
    v = np.array(v0, dtype=np.float64)
    f = cost(v)
    step = cfg.step0
    for _ in range(cfg.iterations):
        g = np.empty(6)
        for i in range(6):
            e = np.zeros(6)
            e[i] = FD_STEPS[i]
            g[i] = (cost(v + e) - cost(v - e)) / 2.0   # derivative per FD-step unit
        norm = np.linalg.norm(g)
        if norm == 0.0:
            break
        cand = v - step * FD_STEPS * g / norm
        fc = cost(cand)
        if fc < f:
            v, f = cand, fc
            step *= 1.5
        else:
            step *= 0.5
            if step < cfg.min_step:
                break
    return v, f


def intensity_register(moving, fixed, metric="mse", config=None):
    """Best-of-multistart affine minimizing ``metric`` over the FOV union.

    The identity is always the first start, so the result is never worse than
    the identity in the chosen metric.
    """
    if metric not in ("mse", "ncc"):
        raise ValueError(f"unknown metric {metric!r}")
    cfg = config or IntensityConfig()
    moving = np.asarray(moving, dtype=np.float64)
    if moving.shape != np.shape(fixed):
        raise ValueError("images must have the same shape")
    center = geo.image_center(moving.shape)
    cost = _cost_fn(moving, fixed, metric, center)
    rng = np.random.default_rng(cfg.seed)
    starts = [np.array([0.0, 0.0, 0.0, 1.0, 1.0, 0.0])]
    for _ in range(cfg.n_starts - 1):
        a = geo.sample_affine(cfg.start_ranges, rng, center)
        starts.append(np.array([a.params[k] for k in PARAM_ORDER]))
    best_v, best_f = None, math.inf
    for v0 in starts:
        v, f = _descend(cost, v0, cfg)
        if f < best_f:
            best_v, best_f = v, f
    return _vec_to_affine(best_v, center)


# ----------------------------------------------------------------- features --

def harris_response(image, sigma=1.0, k=0.04):
    img = np.asarray(image, dtype=np.float64)
    ix = ndimage.sobel(img, axis=1, mode="nearest")
    iy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, sigma)
    syy = ndimage.gaussian_filter(iy * iy, sigma)
    sxy = ndimage.gaussian_filter(ix * iy, sigma)
    return sxx * syy - sxy**2 - k * (sxx + syy) ** 2


def detect_corners(image, k=100, nms_radius=3, mask_edges=False, tau=0.0, rel_threshold=1e-3):
    """Top-``k`` Harris corners after non-maximum suppression, as (x, y) rows.

    With ``mask_edges`` the detector ignores pixels within 2 px of the FOV
    boundary, otherwise the sector edge competes like any other structure.
    """
    if k < 4:
        raise ValueError("k must be >= 4")
    r = harris_response(image)
    peak = r.max()
    if not peak > 0:
        raise InsufficientFeaturesError("flat response")
    size = 2 * nms_radius + 1
    local_max = r == ndimage.maximum_filter(r, size=size, mode="constant", cval=-np.inf)
    cand = local_max & (r > rel_threshold * peak)
    if mask_edges:
        fov = geo.threshold_mask(image, tau).astype(bool)
        cand &= ndimage.binary_erosion(fov, iterations=2)
    ys, xs = np.nonzero(cand)
    order = np.lexsort((xs, ys, -r[ys, xs]))[:k]
    if len(order) < 4:
        raise InsufficientFeaturesError(f"only {len(order)} corners found")
    return np.stack([xs[order], ys[order]], axis=1).astype(np.float64)


def patch_descriptors(image, kps, radius=4):
    """Zero-mean, unit-norm ``(2r+1)^2`` patches; zero padding at the border."""
    img = np.pad(np.asarray(image, dtype=np.float64), radius)
    out = np.zeros((len(kps), (2 * radius + 1) ** 2))
    for i, (x, y) in enumerate(np.asarray(kps, dtype=int)):
        p = img[y:y + 2 * radius + 1, x:x + 2 * radius + 1].ravel()
        p = p - p.mean()
        n = np.linalg.norm(p)
        out[i] = p / n if n > 0 else p
    return out


def match_descriptors(kps_a, kps_b, image_a, image_b, ratio=0.9, radius=4):
    """Mutual nearest neighbours that pass the ratio test."""
    if len(kps_a) == 0 or len(kps_b) == 0:
        return []
    da = patch_descriptors(image_a, kps_a, radius)
    db = patch_descriptors(image_b, kps_b, radius)
    dist = np.sqrt(np.maximum(((da[:, None, :] - db[None, :, :]) ** 2).sum(-1), 0.0))
    nn_ab = dist.argmin(axis=1)
    nn_ba = dist.argmin(axis=0)
    out = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        row = np.sort(dist[i])
        second = row[1] if len(row) > 1 else np.inf
        if row[0] < ratio * second:
            out.append(Correspondence(tuple(kps_a[i]), tuple(kps_b[j]), float(row[0])))
    return out


def _arrays(corrs):
    pm = np.array([c.p_moving for c in corrs], dtype=np.float64).reshape(-1, 2)
    pf = np.array([c.p_fixed for c in corrs], dtype=np.float64).reshape(-1, 2)
    return pm, pf


def _solve_affine(pm, pf):
    """Least-squares 2x3 affine via an orthogonal (QR-based) solver."""
    a = np.hstack([pm, np.ones((len(pm), 1))])
    if np.linalg.matrix_rank(a) < 3:
        raise EstimationFailedError("correspondences are collinear")
    sol, *_ = np.linalg.lstsq(a, pf, rcond=None)
    m = np.eye(3)
    m[:2, :] = sol.T
    return m


def lstsq_affine(corrs, center=(0.0, 0.0)):
    pm, pf = _arrays(corrs)
    if len(pm) < 3:
        raise EstimationFailedError("need at least 3 correspondences")
    return geo.AffineTransform(_solve_affine(pm, pf), center=center)


def _residuals(m, pm, pf):
    return np.linalg.norm(pm @ m[:2, :2].T + m[:2, 2] - pf, axis=1)


def ransac_affine(corrs, n_iter=1000, inlier_px=2.0, rng=None, center=(0.0, 0.0)):
    """RANSAC over minimal 3-point samples, then a least-squares refit on the inliers.

    Candidates are ranked by inlier count, then mean inlier residual, then
    iteration order.  The refit is kept only if it does not lose inliers.
    """
    pm, pf = _arrays(corrs)
    n = len(pm)
    if n < 3:
        raise EstimationFailedError("need at least 3 correspondences")
    rng = rng if rng is not None else np.random.default_rng(0)
    best = None
    for _ in range(n_iter):
        idx = rng.choice(n, 3, replace=False)
        p = pm[idx]
        area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if abs(area) < 1e-9:
            continue
        m = np.eye(3)
        m[:2, :] = np.linalg.solve(np.hstack([p, np.ones((3, 1))]), pf[idx]).T
        res = _residuals(m, pm, pf)
        inl = res <= inlier_px
        key = (int(inl.sum()), -float(res[inl].mean()))
        if best is None or key > best[0]:
            best = (key, m, inl)
    if best is None:
        raise EstimationFailedError("every sample was collinear")
    _, m, inl = best
    try:
        refit = _solve_affine(pm[inl], pf[inl])
        if (_residuals(refit, pm, pf) <= inlier_px).sum() >= inl.sum():
            m = refit
    except EstimationFailedError:
        pass
    return geo.AffineTransform(m, center=center)


# ------------------------------------------------------------------ methods --

class IntensityMethod:
    group = "conventional"

    def __init__(self, metric="mse", config=None, name=None):
        self.metric = metric
        self.config = config or IntensityConfig()
        self.name = name or f"intensity-{metric}"

    def register(self, moving, fixed):
        return intensity_register(moving, fixed, self.metric, self.config)


class FeatureMethod:
    """Corners + patch matching + RANSAC; identity when too few features survive."""

    group = "conventional"

    def __init__(self, k=100, mask_edges=False, n_iter=1000, inlier_px=2.0, seed=0, name="feature-ransac"):
        self.k = k
        self.mask_edges = mask_edges
        self.n_iter = n_iter
        self.inlier_px = inlier_px
        self.seed = seed
        self.name = name

    def register(self, moving, fixed):
        center = geo.image_center(np.shape(moving))
        try:
            ka = detect_corners(moving, self.k, mask_edges=self.mask_edges)
            kb = detect_corners(fixed, self.k, mask_edges=self.mask_edges)
            corrs = match_descriptors(ka, kb, moving, fixed)
            return ransac_affine(corrs, self.n_iter, self.inlier_px, np.random.default_rng(self.seed), center)
        except (InsufficientFeaturesError, EstimationFailedError) as exc:
            log.info("%s fell back to identity: %s", self.name, exc)
            return geo.AffineTransform.identity(center)


class IdentityMethod:
    group = "reference"
    name = "identity"

    def register(self, moving, fixed):
        return geo.AffineTransform.identity(geo.image_center(np.shape(moving)))
