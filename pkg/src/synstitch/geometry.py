"""Affine algebra, inverse-mapping warps, FOV masks and condition patches.

Coordinates are pixel coordinates with ``x`` the column index and ``y`` the
row index, both measured at pixel centers.  A transform ``A`` maps a point of
the source image to its location in the output image, so warping uses the
inverse mapping ``out(p) = in(A^-1 p)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class GeometryError(ValueError):
    pass


class InvalidParameterError(GeometryError):
    pass


class InvalidTransformError(GeometryError):
    pass


class NoOverlapError(GeometryError):
    pass


PARAM_NAMES = ("tx", "ty", "theta", "sx", "sy", "shear")


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _trans(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


@dataclass
class AffineTransform:
    """3x3 homogeneous affine matrix together with its parameterization.

    ``params`` holds ``tx, ty, theta, sx, sy, shear``; ``center`` is the
    rotation/scale pivot the parameters refer to.
    """

    matrix: np.ndarray
    params: dict = field(default_factory=dict)
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        self.center = (float(self.center[0]), float(self.center[1]))
        if not self.params:
            self.params = matrix_to_params(self.matrix, self.center)

    @classmethod
    def identity(cls, center=(0.0, 0.0)):
        return cls(np.eye(3), dict(tx=0.0, ty=0.0, theta=0.0, sx=1.0, sy=1.0, shear=0.0), center)

    @property
    def det(self):
        return float(np.linalg.det(self.matrix[:2, :2]))

    def inverse(self):
        if abs(self.det) <= 1e-9:
            raise InvalidTransformError("transform is singular")
        return AffineTransform(np.linalg.inv(self.matrix), center=self.center)

    def apply(self, points):
        """Map an (N, 2) array of (x, y) points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.matrix[:2, :2].T + self.matrix[:2, 2]

    def to_dict(self):
        return {
            "matrix": self.matrix.tolist(),
            "params": {k: float(v) for k, v in self.params.items()},
            "center": list(self.center),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["matrix"], dtype=np.float64), dict(d.get("params", {})), tuple(d["center"]))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def image_center(shape):
    h, w = shape[:2]
    return ((w - 1) / 2.0, (h - 1) / 2.0)


def params_to_matrix(params, center=(0.0, 0.0)):
    """Build ``T(c) . T(t) . R(theta) . S(sx, sy) . Sh(shear) . T(-c)``.

    ``params`` is a mapping with keys from ``PARAM_NAMES``; missing keys take
    their identity value.  Shear is the upper off-diagonal of the (pre-rotation)
    linear part.
    """
    p = dict(tx=0.0, ty=0.0, theta=0.0, sx=1.0, sy=1.0, shear=0.0)
    p.update({k: float(v) for k, v in params.items()})
    unknown = set(p) - set(PARAM_NAMES)
    if unknown:
        raise InvalidParameterError(f"unknown affine parameters {sorted(unknown)}")
    if not (p["sx"] > 0 and p["sy"] > 0):
        raise InvalidParameterError(f"scale must be positive, got sx={p['sx']}, sy={p['sy']}")
    cx, cy = center
    scale = np.diag([p["sx"], p["sy"], 1.0])
    shear = np.array([[1.0, p["shear"], 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    m = _trans(cx, cy) @ _trans(p["tx"], p["ty"]) @ _rot(p["theta"]) @ scale @ shear @ _trans(-cx, -cy)
    return AffineTransform(m, p, center)


def matrix_to_params(matrix, center=(0.0, 0.0)):
    """Inverse of :func:`params_to_matrix` for matrices with positive determinant."""
    m = np.asarray(matrix, dtype=np.float64)
    lin = m[:2, :2]
    sx = math.hypot(lin[0, 0], lin[1, 0])
    if sx == 0.0:
        raise InvalidTransformError("degenerate linear part")
    theta = math.atan2(lin[1, 0], lin[0, 0])
    c, s = math.cos(theta), math.sin(theta)
    # upper-triangular factor U = R^T L = [[sx, sx*shear], [0, sy]]
    u01 = c * lin[0, 1] + s * lin[1, 1]
    sy = -s * lin[0, 1] + c * lin[1, 1]
    ctr = np.asarray(center, dtype=np.float64)
    t = m[:2, 2] - ctr + lin @ ctr
    return dict(tx=float(t[0]), ty=float(t[1]), theta=theta, sx=sx, sy=sy, shear=u01 / sx)


def compose(a, b):
    """Apply ``b`` first, then ``a``."""
    return AffineTransform(a.matrix @ b.matrix, center=a.center)


def sample_affine(ranges, rng, center=(0.0, 0.0)):
    """Draw ``tx, ty ~ U(t)``, ``theta ~ U(theta)``, ``sx = sy ~ U(s)`` in that order."""
    for key in ("t", "theta", "s"):
        lo, hi = ranges[key]
        if lo > hi:
            raise InvalidParameterError(f"range {key}: lo {lo} > hi {hi}")
    tx = rng.uniform(*ranges["t"])
    ty = rng.uniform(*ranges["t"])
    theta = rng.uniform(*ranges["theta"])
    s = rng.uniform(*ranges["s"])
    return params_to_matrix(dict(tx=tx, ty=ty, theta=theta, sx=s, sy=s), center)


def _as_matrix(a):
    return a.matrix if isinstance(a, AffineTransform) else np.asarray(a, dtype=np.float64)


def warp(image, a, interp="bilinear"):
    """Inverse-mapping warp with zero fill outside the source grid."""
    if interp not in ("bilinear", "nearest"):
        raise GeometryError(f"unknown interpolation {interp!r}")
    m = _as_matrix(a)
    if abs(np.linalg.det(m[:2, :2])) <= 1e-9:
        raise InvalidTransformError("transform is singular")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    inv = np.linalg.inv(m)
    if interp == "bilinear":
        # same zero-padded bilinear rule as sample_image, in compiled code; (row, col) order
        return ndimage.affine_transform(img, inv[1::-1, 1::-1], offset=inv[1::-1, 2], order=1,
                                        mode="grid-constant", cval=0.0)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return sample_image(img, sx, sy, interp)


def sample_image(img, sx, sy, interp="bilinear"):
    """Sample ``img`` at continuous (x, y) positions; outside the grid reads 0."""
    if interp == "nearest":
        return _gather(img, np.floor(sx + 0.5), np.floor(sy + 0.5))
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    return ((1 - fy) * ((1 - fx) * _gather(img, x0, y0) + fx * _gather(img, x0 + 1, y0))
            + fy * ((1 - fx) * _gather(img, x0, y0 + 1) + fx * _gather(img, x0 + 1, y0 + 1)))


def _gather(img, x, y):
    h, w = img.shape
    ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xi = np.clip(x, 0, w - 1).astype(np.intp)
    yi = np.clip(y, 0, h - 1).astype(np.intp)
    return np.where(ok, img[yi, xi], 0.0)


def warp_mask(mask, a):
    return (warp(np.asarray(mask, dtype=np.float64), a, "nearest") > 0.5).astype(np.uint8)


def threshold_mask(image, tau=0.0):
    if tau < 0:
        raise GeometryError("tau must be non-negative")
    return (np.asarray(image) > tau).astype(np.uint8)


def condition_train(image, a, tau=0.0):
    """Training-mode condition: overlap mask applied to the untransformed image."""
    m = threshold_mask(image, tau)
    mc = m & warp_mask(m, a)
    if not mc.any():
        raise NoOverlapError("FOV and transformed FOV do not overlap")
    return mc * np.asarray(image, dtype=np.float64), mc


def condition_infer(image, a, tau=0.0):
    """Inference-mode condition: overlap mask applied to the transformed image.

    Returns ``(C_s, M_c, I_aff)``.
    """
    m = threshold_mask(image, tau)
    mc = m & warp_mask(m, a)
    if not mc.any():
        raise NoOverlapError("FOV and transformed FOV do not overlap")
    i_aff = warp(image, a, "bilinear")
    return mc * i_aff, mc, i_aff


def overlap_fraction(mc, m):
    return float(np.count_nonzero(mc)) / max(int(np.count_nonzero(m)), 1)
