import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synstitch import geometry as geo
from synstitch import metrics as mt

# literal-formula oracles, written as plain loops


def mse_oracle(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            s += (a[i, j] - b[i, j]) ** 2
    return s / a.size


def ssim_oracle(a, b, w=7):
    h, wd = a.shape
    vals = []
    for i in range(h - w + 1):
        for j in range(wd - w + 1):
            xa = [a[i + u, j + v] for u in range(w) for v in range(w)]
            xb = [b[i + u, j + v] for u in range(w) for v in range(w)]
            n = len(xa)
            ma = sum(xa) / n
            mb = sum(xb) / n
            va = sum((x - ma) ** 2 for x in xa) / n
            vb = sum((x - mb) ** 2 for x in xb) / n
            cov = sum((x - ma) * (y - mb) for x, y in zip(xa, xb)) / n
            c1, c2 = 0.01**2, 0.03**2
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def ncc_oracle(a, b):
    xa, xb = a.ravel().tolist(), b.ravel().tolist()
    n = len(xa)
    ma, mb = sum(xa) / n, sum(xb) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(xa, xb))
    va = sum((x - ma) ** 2 for x in xa)
    vb = sum((y - mb) ** 2 for y in xb)
    return cov / math.sqrt(va * vb)


def rmse_oracle(pm, pf, m):
    s = 0.0
    for (x, y), (u, v) in zip(pm, pf):
        ex = m[0][0] * x + m[0][1] * y + m[0][2] - u
        ey = m[1][0] * x + m[1][1] * y + m[1][2] - v
        s += ex * ex + ey * ey
    return math.sqrt(s / len(pm))


def test_mse_examples():
    img = np.random.default_rng(0).random((8, 8))
    assert mt.mse(img, img) == 0.0
    a, b = np.zeros((6, 6)), np.full((6, 6), 0.1)
    assert mt.mse(a, b) == pytest.approx(0.01, abs=1e-15)
    assert mt.mse(a, b) * 100 == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        mt.mse(np.zeros((3, 3)), np.zeros((3, 4)))


def test_ssim_examples():
    img = np.random.default_rng(1).random((9, 9))
    assert mt.ssim(img, img) == 1.0
    with pytest.raises(ValueError):
        mt.ssim(np.zeros((5, 5)), np.zeros((5, 5)))
    with pytest.raises(ValueError):
        mt.ssim(img, img, window=4)


def test_ssim_inverted_checkerboard():
    # on a 7x7 checkerboard window: mu_a=25/49, mu_b=24/49, var_a=var_b=600/2401,
    # cov=-600/2401 so the structure term is (c2 - 1200/2401)/(1200/2401 + c2)
    i = (np.indices((7, 7)).sum(0) % 2 == 0).astype(float)
    ma, mb, v = 25 / 49, 24 / 49, 600 / 2401
    c1, c2 = mt.SSIM_C1, mt.SSIM_C2
    expected = (2 * ma * mb + c1) * (c2 - 2 * v) / ((ma * ma + mb * mb + c1) * (2 * v + c2))
    assert mt.ssim(i, 1 - i) == pytest.approx(expected, abs=1e-12)
    # structure/contrast part alone is close to -1
    assert (c2 - 2 * v) / (2 * v + c2) == pytest.approx(-1.0, abs=0.01)


def test_ncc_examples():
    rng = np.random.default_rng(2)
    img = rng.random((8, 8))
    assert mt.ncc(img, img) == pytest.approx(1.0, abs=1e-12)
    assert mt.ncc(img, 3.0 * img + 0.2) == pytest.approx(1.0, abs=1e-12)
    assert mt.ncc(img, -img) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(mt.UndefinedMetricError):
        mt.ncc(np.ones((4, 4)), img[:4, :4])


def test_keypoint_rmse_examples():
    pm = np.array([[1.0, 2.0], [5.0, 7.0], [10.0, 0.0]])
    ident = geo.AffineTransform.identity()
    assert mt.keypoint_rmse(pm, pm + [3.0, 4.0], ident) == pytest.approx(5.0, abs=1e-12)
    a = geo.params_to_matrix(dict(tx=1, theta=0.2, sx=1.1, sy=0.9), (4, 4))
    assert mt.keypoint_rmse(pm, a.apply(pm), a) < 1e-12
    with pytest.raises(ValueError):
        mt.keypoint_rmse(np.zeros((0, 2)), np.zeros((0, 2)), ident)


def _random_case(rng):
    h, w = rng.integers(7, 10, size=2)
    a = rng.random((h, w))
    b = np.clip(a + rng.normal(0, 0.3, (h, w)), 0, 1) if rng.random() < 0.5 else rng.random((h, w))
    return a, b


def test_metrics_match_brute_force_oracles():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a, b = _random_case(rng)
        assert abs(mt.mse(a, b) - mse_oracle(a, b)) <= 1e-9
        assert abs(mt.ssim(a, b) - ssim_oracle(a, b)) <= 1e-9
        assert abs(mt.ncc(a, b) - ncc_oracle(a, b)) <= 1e-9
        n = rng.integers(1, 12)
        pm = rng.uniform(0, 9, (n, 2))
        pf = rng.uniform(0, 9, (n, 2))
        aff = geo.params_to_matrix(dict(tx=rng.normal(), ty=rng.normal(), theta=rng.normal(0, 0.3),
                                        sx=rng.uniform(0.8, 1.2), sy=rng.uniform(0.8, 1.2)), (4, 4))
        assert abs(mt.keypoint_rmse(pm, pf, aff) - rmse_oracle(pm, pf, aff.matrix.tolist())) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)), arrays(np.float64, (8, 8), elements=st.floats(0, 1)))
def test_ssim_ncc_symmetric_and_bounded(a, b):
    s_ab, s_ba = mt.ssim(a, b), mt.ssim(b, a)
    assert abs(s_ab - s_ba) <= 1e-12 and s_ab <= 1 + 1e-9
    try:
        n_ab = mt.ncc(a, b)
    except mt.UndefinedMetricError:
        return
    assert abs(n_ab - mt.ncc(b, a)) <= 1e-12 and -1 - 1e-9 <= n_ab <= 1 + 1e-9


def test_keypoint_rmse_permutation_invariant():
    rng = np.random.default_rng(4)
    pm, pf = rng.random((15, 2)) * 30, rng.random((15, 2)) * 30
    a = geo.params_to_matrix(dict(tx=2, theta=0.1), (10, 10))
    perm = rng.permutation(15)
    assert mt.keypoint_rmse(pm, pf, a) == pytest.approx(mt.keypoint_rmse(pm[perm], pf[perm], a), abs=1e-12)


def test_paired_t_two_points():
    # d = [1, 3]: mean 2, sd sqrt(2), t = 2 / (sqrt(2)/sqrt(2)) = 2; 1 dof is Cauchy
    r = mt.paired_t_test([1.0, 3.0], [0.0, 0.0])
    assert r["t"] == pytest.approx(2.0, abs=1e-12)
    assert r["p"] == pytest.approx(1 - 2 * math.atan(2) / math.pi, abs=1e-4)
    assert r["p"] == pytest.approx(0.29517, abs=1e-4)


def test_paired_t_five_points():
    # d = [1,1,1,1,2]: mean 1.2, sd sqrt(0.2), t = 1.2 / (sqrt(0.2)/sqrt(5)) = 6 exactly.
    # 4 dof: two-sided p = 1 - x(3 - x^2)/2 with x = t / sqrt(t^2 + 4) = 6/sqrt(40).
    r = mt.paired_t_test([2.0, 2.0, 2.0, 2.0, 3.0], [1.0, 1.0, 1.0, 1.0, 1.0])
    assert r["t"] == pytest.approx(6.0, abs=1e-12)
    x = 6 / math.sqrt(40)
    assert r["p"] == pytest.approx(1 - x * (3 - x * x) / 2, abs=1e-4)
    assert r["p"] == pytest.approx(0.003883, abs=1e-4)
    # t-table: the two-sided 0.01 critical value at 4 dof is 4.604 < 6
    assert r["p"] < 0.01


def test_paired_t_degenerate():
    with pytest.raises(mt.DegenerateInputError):
        mt.paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        mt.paired_t_test([1.0], [2.0])


def test_t_tail_against_scipy():
    stats = pytest.importorskip("scipy.stats")
    for dof in (1, 2, 4, 10, 59):
        for t in (0.0, 0.3, 1.0, 2.5, 7.0, 25.0):
            assert mt.student_t_sf2(t, dof) == pytest.approx(2 * stats.t.sf(t, dof), abs=1e-8)


class _Fixed:
    def __init__(self, name, a_fn, group="conventional"):
        self.name, self.group, self._fn = name, group, a_fn

    def register(self, moving, fixed):
        return self._fn(moving, fixed)


class _Broken:
    name, group = "broken", "conventional"

    def register(self, moving, fixed):
        raise RuntimeError("boom")


def _warp_pairs(n=4, seed=0):
    from synstitch.phantomgen import gen_subject
    rng = np.random.default_rng(seed)
    s = gen_subject(seed, 1, 32)
    img = s.frames[0].astype(float)
    c = geo.image_center(img.shape)
    pairs = []
    for k in range(n):
        a = geo.sample_affine(dict(t=(-4, 4), theta=(-0.1, 0.1), s=(0.95, 1.05)), rng, c)
        kps = s.landmarks[0]
        pairs.append(dict(pair_id=f"p{k}", moving=img, fixed=geo.warp(img, a), gt=a,
                          keypoints_moving=kps, keypoints_fixed=a.apply(kps)))
    return pairs


def test_evaluate_all_oracle_and_failures(tmp_path):
    pairs = _warp_pairs()
    lookup = {p["fixed"].tobytes(): p["gt"] for p in pairs}
    oracle = _Fixed("oracle", lambda m, f: lookup[f.tobytes()], "proposed")
    ident = _Fixed("identity", lambda m, f: geo.AffineTransform.identity(geo.image_center(m.shape)))
    records, transforms = mt.evaluate_all([oracle, ident, _Broken()], pairs, tmp_path)
    assert len(records) == 3 * len(pairs)
    rows = mt.read_results_csv(tmp_path / "results.csv")
    assert len(rows) == 3 * len(pairs)
    assert all(r.kp_rmse <= 1e-6 for r in rows if r.method == "oracle")
    assert all(r.status == "failed" and math.isnan(r.mse_x100) for r in rows if r.method == "broken")
    md = (tmp_path / "summary.md").read_text()
    assert "| failures | 0 | 0 | 4 |" in md
    assert "**" in md
    assert (tmp_path / "transforms" / "oracle_p0.json").exists()
    assert transforms[("broken", "p0")] is None


def test_identity_pairs_score_optimal():
    from synstitch.phantomgen import gen_subject
    img = gen_subject(1, 1, 32).frames[0].astype(float)
    kps = np.array([[10.0, 12.0], [20.0, 15.0]])
    pair = dict(pair_id="id", moving=img, fixed=img, keypoints_moving=kps, keypoints_fixed=kps)
    r = mt.score_pair("identity", pair, geo.AffineTransform.identity(geo.image_center(img.shape)))
    assert r.mse_x100 == 0.0 and r.kp_rmse == 0.0
    assert r.ssim == pytest.approx(1.0) and r.ncc == pytest.approx(1.0)


def test_significance_marks_clear_winner():
    rng = np.random.default_rng(5)
    recs = []
    for k in range(20):
        u = rng.random(4) * 0.05
        recs.append(mt.EvalRecord("ism", f"p{k}", 1 + u[0], 0.9 + u[1], 0.95 + u[2], 1 + u[3]))
        recs.append(mt.EvalRecord("base", f"p{k}", 3 - u[1], 0.6 - u[0], 0.7 + u[3], 4 + u[2]))
    recs.append(mt.EvalRecord("base", "p0", *[float("nan")] * 4, "failed"))
    marks = mt.significance(recs, {"ism": "proposed", "base": "conventional"})
    assert all(marks[("ism", k)] for k in mt.METRIC_KEYS)
    md = mt.summary_markdown(recs, {"ism": "proposed", "base": "conventional"})
    assert "*" in md.splitlines()[2]
