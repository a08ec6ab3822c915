"""Fast oracle and property checks runnable from an installed package (no pytest needed)."""

from __future__ import annotations

import math
import time

import numpy as np
import torch

from . import baselines as bl
from . import diffusion as dd
from . import geometry as geo
from . import metrics as mt
from . import phantomgen as pg
from . import sspgm


def _schedule_and_diffusion():
    for T in (1, 10, 200, 1000):
        s = dd.make_schedule(T, 1e-4, 0.02)
        assert np.all(np.diff(s.alpha_bar) < 0) and np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
        assert np.allclose(s.alpha_bar, np.cumprod(s.alpha), rtol=1e-12, atol=0)
    s = dd.make_schedule(200, 5e-4, 0.1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        img, eps, t = rng.random((16, 16)), rng.standard_normal((16, 16)), int(rng.integers(200))
        x = dd.forward_diffuse(img, t, eps, s)
        back = (x - math.sqrt(1 - s.alpha_bar[t]) * eps) / math.sqrt(s.alpha_bar[t])
        assert np.abs(back - img).max() <= 1e-6


def _metric_oracles():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.random((9, 9)), rng.random((9, 9))
        assert abs(mt.mse(a, b) - sum((a[i, j] - b[i, j]) ** 2 for i in range(9) for j in range(9)) / 81) <= 1e-9
        da, db = a - a.mean(), b - b.mean()
        assert abs(mt.ncc(a, b) - (da * db).sum() / math.sqrt((da**2).sum() * (db**2).sum())) <= 1e-9
        vals = []
        for i in range(3):
            for j in range(3):
                wa, wb = a[i:i + 7, j:j + 7], b[i:i + 7, j:j + 7]
                ma, mb = wa.mean(), wb.mean()
                va, vb = ((wa - ma) ** 2).mean(), ((wb - mb) ** 2).mean()
                cv = ((wa - ma) * (wb - mb)).mean()
                vals.append((2 * ma * mb + mt.SSIM_C1) * (2 * cv + mt.SSIM_C2)
                            / ((ma**2 + mb**2 + mt.SSIM_C1) * (va + vb + mt.SSIM_C2)))
        assert abs(mt.ssim(a, b) - np.mean(vals)) <= 1e-9


def _t_test_values():
    r = mt.paired_t_test([1.0, 3.0], [0.0, 0.0])
    assert abs(r["t"] - 2.0) < 1e-12 and abs(r["p"] - (1 - 2 * math.atan(2) / math.pi)) < 1e-4
    r = mt.paired_t_test([2.0, 2.0, 2.0, 2.0, 3.0], [1.0] * 5)
    x = 6 / math.sqrt(40)
    assert abs(r["t"] - 6.0) < 1e-12 and abs(r["p"] - (1 - x * (3 - x * x) / 2)) < 1e-4


def _geometry():
    rng = np.random.default_rng(2)
    img = rng.random((24, 24))
    c = geo.image_center(img.shape)
    assert np.array_equal(geo.warp(img, geo.AffineTransform.identity(c)), img)
    for _ in range(10):
        p = dict(tx=rng.normal(0, 5), ty=rng.normal(0, 5), theta=rng.normal(0, 0.3),
                 sx=rng.uniform(0.8, 1.2), sy=rng.uniform(0.8, 1.2), shear=rng.normal(0, 0.1))
        a = geo.params_to_matrix(p, c)
        assert np.allclose(geo.params_to_matrix(geo.matrix_to_params(a.matrix, c), c).matrix, a.matrix, atol=1e-9)
    s = pg.gen_subject(0, 1, 32)
    a = geo.sample_affine(sspgm.GEN_RANGES, rng, geo.image_center((32, 32)))
    cond, mc = geo.condition_train(s.frames[0], a)
    cs, mcs, _ = geo.condition_infer(s.frames[0], a)
    assert np.array_equal(mc, mcs) and not cond[mc == 0].any() and not cs[mcs == 0].any()
    assert np.array_equal(geo.threshold_mask(s.frames[0]), s.fov_mask)


def _zero_conv_identity():
    torch.manual_seed(0)
    base = dd.DenoiserNet(dd.NetConfig(channels=(8, 16), temb_mult=2)).eval()
    cn = sspgm.ControlNet(base)
    x, c = torch.randn(2, 1, 16, 16), torch.rand(2, 1, 16, 16)
    t = torch.tensor([3, 150])
    with torch.no_grad():
        assert (cn(x, t, c) - base(x, t)).abs().max() <= 1e-5


def _ransac():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = geo.params_to_matrix(dict(tx=rng.uniform(-8, 8), ty=rng.uniform(-8, 8), theta=rng.uniform(-0.2, 0.2),
                                      sx=rng.uniform(0.9, 1.1), sy=rng.uniform(0.9, 1.1)), (32, 32))
        pm = rng.uniform(0, 64, (29, 2))
        pf = a.apply(pm)
        pf[20:] += rng.uniform(5, 20, (9, 2)) * rng.choice([-1, 1], (9, 2))
        corrs = [bl.Correspondence(tuple(p), tuple(q), 0.0) for p, q in zip(pm, pf)]
        est = bl.ransac_affine(corrs, 1000, 2.0, np.random.default_rng(0))
        assert np.abs(est.matrix - a.matrix).max() <= 1e-6


CHECKS = [
    ("schedule invariants and closed-form inversion", _schedule_and_diffusion),
    ("metric brute-force oracles", _metric_oracles),
    ("paired t-test reference values", _t_test_values),
    ("geometry round trips and mask algebra", _geometry),
    ("zero-conv identity", _zero_conv_identity),
    ("RANSAC recovery with outliers", _ransac),
]


def run(echo=print):
    """Run all checks; returns True when every one passes."""
    ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
            echo(f"PASS  {name} ({time.perf_counter() - t0:.2f}s)")
        except AssertionError as exc:
            ok = False
            echo(f"FAIL  {name}: {exc or 'assertion failed'}")
    return ok
