"""Image similarity metrics, keypoint error, paired t-test and the evaluation table."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import geometry as geo
from .storage import write_json

log = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class UndefinedMetricError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b, mask=None):
    a, b = _pair(a, b)
    d = (a - b) ** 2
    if mask is not None:
        return float(d[np.asarray(mask) > 0].mean())
    return float(d.mean())


def ssim(a, b, window=7, mask=None):
    """Mean SSIM over all fully-contained ``window x window`` uniform windows.

    Local statistics are population (1/N) moments.  With ``mask`` only windows
    whose center lies in the mask are averaged.
    """
    a, b = _pair(a, b)
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be odd")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than window {window}")
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    va = (wa**2).mean(axis=(-1, -2)) - mu_a**2
    vb = (wb**2).mean(axis=(-1, -2)) - mu_b**2
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a**2 + mu_b**2 + SSIM_C1) * (va + vb + SSIM_C2))
    if mask is not None:
        r = window // 2
        m = np.asarray(mask)[r:a.shape[0] - r, r:a.shape[1] - r] > 0
        return float(s[m].mean())
    return float(s.mean())


def ncc(a, b, mask=None):
    """Pearson correlation of the (optionally masked) pixels."""
    a, b = _pair(a, b)
    if mask is not None:
        sel = np.asarray(mask) > 0
        a, b = a[sel], b[sel]
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        raise UndefinedMetricError("zero variance input")
    return float(a @ b) / den


def keypoint_rmse(kps_moving, kps_fixed, a):
    pm = np.asarray(kps_moving, dtype=np.float64).reshape(-1, 2)
    pf = np.asarray(kps_fixed, dtype=np.float64).reshape(-1, 2)
    if len(pm) == 0 or len(pm) != len(pf):
        raise ValueError("keypoint lists must be non-empty and aligned")
    d = a.apply(pm) - pf
    return float(np.sqrt(np.mean(np.sum(d**2, axis=1))))


def _betacf(a, b, x, max_iter=500, eps=1e-16):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a, b, x):
    """Regularized incomplete beta ``I_x(a, b)``; about 1e-12 accurate in double precision."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t, dof):
    """Two-sided tail probability ``P(|T| >= |t|)``."""
    return betainc_reg(dof / 2.0, 0.5, dof / (dof + t * t))


def paired_t_test(x, y):
    """Two-sided paired t-test on ``x - y``; returns ``{"t", "p", "mean_diff"}``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("paired_t_test needs two equal-length 1-D samples with n >= 2")
    d = x - y
    n = len(d)
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateInputError("differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    return dict(t=float(t), p=float(student_t_sf2(t, n - 1)), mean_diff=float(d.mean()))


@dataclass
class EvalRecord:
    method: str
    pair_id: str
    mse_x100: float
    ssim: float
    ncc: float
    kp_rmse: float
    status: str = "ok"


METRIC_KEYS = ("mse_x100", "ssim", "ncc", "kp_rmse")
LOWER_IS_BETTER = dict(mse_x100=True, ssim=False, ncc=False, kp_rmse=True)
METRIC_LABELS = dict(mse_x100="MSE(x100)", ssim="SSIM", ncc="NCC", kp_rmse="RMSE")


def score_pair(method_name, pair, a_est, masked=False, ssim_window=7):
    """Metrics of ``warp(moving, a_est)`` against ``fixed`` over the full canvas."""
    warped = geo.warp(pair["moving"], a_est)
    fixed = np.asarray(pair["fixed"], dtype=np.float64)
    mask = None
    if masked:
        mask = geo.threshold_mask(warped) & geo.threshold_mask(fixed)
    status = "ok"
    try:
        n = ncc(warped, fixed, mask)
    except UndefinedMetricError:
        n, status = float("nan"), "ncc_undefined"
    return EvalRecord(
        method_name, pair["pair_id"],
        mse(warped, fixed, mask) * 100.0,
        ssim(warped, fixed, ssim_window, mask),
        n,
        keypoint_rmse(pair["keypoints_moving"], pair["keypoints_fixed"], a_est),
        status,
    )


def _register_and_score(job):
    m, pair, masked, ssim_window = job
    try:
        a = m.register(pair["moving"], pair["fixed"])
    except Exception as exc:  # noqa: BLE001 - a failed pair must not stop the table
        log.warning("%s failed on %s: %s", m.name, pair["pair_id"], exc)
        return EvalRecord(m.name, pair["pair_id"], *([float("nan")] * 4), "failed"), None
    return score_pair(m.name, pair, a, masked, ssim_window), a


def evaluate_all(methods, eval_pairs, out_dir=None, masked=False, ssim_window=7, jobs=1):
    """Run every method on every pair and tabulate.

    Methods expose ``name``, ``group`` and ``register(moving, fixed)``.  A
    failing registration is recorded with status ``failed`` and NaN metrics.
    Pairs are independent, so ``jobs > 1`` spreads them over worker processes
    without changing any result.  Returns ``(records, transforms)`` where
    ``transforms[(method, pair_id)]`` is the estimated affine (``None`` on
    failure).
    """
    work = [(m, pair, masked, ssim_window) for m in methods for pair in eval_pairs]
    if jobs > 1 and len(work) > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as ex:
            results = list(ex.map(_register_and_score, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        results = [_register_and_score(j) for j in work]
    records = [r for r, _ in results]
    transforms = {(j[0].name, j[1]["pair_id"]): a for j, (_, a) in zip(work, results)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_results_csv(out / "results.csv", records)
        groups = {m.name: getattr(m, "group", "conventional") for m in methods}
        write_json(out / "methods.json", groups)
        (out / "summary.md").write_text(summary_markdown(records, groups))
        tdir = out / "transforms"
        tdir.mkdir(exist_ok=True)
        for (name, pid), a in transforms.items():
            if a is not None:
                write_json(tdir / f"{name}_{pid}.json", a.to_dict())
    return records, transforms


def write_results_csv(path, records):
    fields = list(EvalRecord.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in records:
            row = asdict(r)
            for k in METRIC_KEYS:
                row[k] = repr(float(row[k]))
            w.writerow(row)


def read_results_csv(path):
    out = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            out.append(EvalRecord(row["method"], row["pair_id"],
                                  *(float(row[k]) for k in METRIC_KEYS), row.get("status", "ok")))
    return out


def summarize(records):
    """``{method: {metric: (mean, std, n)}}`` over finite values."""
    out = {}
    for r in records:
        out.setdefault(r.method, {k: [] for k in METRIC_KEYS})
        for k in METRIC_KEYS:
            v = getattr(r, k)
            if math.isfinite(v):
                out[r.method][k].append(v)
    return {m: {k: (float(np.mean(v)) if v else float("nan"),
                    float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, len(v))
                for k, v in d.items()} for m, d in out.items()}


def significance(records, groups, alpha=0.05):
    """Methods in group ``proposed`` significantly better than every other method, per metric."""
    by = {}
    for r in records:
        by.setdefault(r.method, {})[r.pair_id] = r
    marks = {}
    proposed = [m for m in by if groups.get(m) == "proposed"]
    others = [m for m in by if groups.get(m) != "proposed"]
    for m in proposed:
        for k in METRIC_KEYS:
            ok = bool(others)
            for o in others:
                ids = [p for p in by[m] if p in by[o]
                       and math.isfinite(getattr(by[m][p], k)) and math.isfinite(getattr(by[o][p], k))]
                if len(ids) < 2:
                    ok = False
                    break
                x = [getattr(by[m][p], k) for p in ids]
                y = [getattr(by[o][p], k) for p in ids]
                try:
                    res = paired_t_test(x, y)
                except DegenerateInputError:
                    ok = False
                    break
                better = res["mean_diff"] < 0 if LOWER_IS_BETTER[k] else res["mean_diff"] > 0
                if not (better and res["p"] < alpha):
                    ok = False
                    break
            marks[(m, k)] = ok
    return marks


def summary_markdown(records, groups=None):
    """Metrics-by-method grid: bold best, underlined second best, ``*`` significant."""
    groups = groups or {}
    stats = summarize(records)
    methods = list(stats)
    marks = significance(records, groups)
    failures = {m: sum(1 for r in records if r.method == m and r.status == "failed") for m in methods}
    lines = ["| Metric | " + " | ".join(methods) + " |", "|---" * (len(methods) + 1) + "|"]
    for k in METRIC_KEYS:
        means = [stats[m][k][0] for m in methods]
        finite = [v for v in means if math.isfinite(v)]
        order = sorted(set(finite), reverse=not LOWER_IS_BETTER[k])
        cells = []
        for m, v in zip(methods, means):
            mu, sd, _ = stats[m][k]
            cell = f"{mu:.2f} ± {sd:.2f}" if math.isfinite(mu) else "n/a"
            if marks.get((m, k)):
                cell += "*"
            if order and v == order[0]:
                cell = f"**{cell}**"
            elif len(order) > 1 and v == order[1]:
                cell = f"<u>{cell}</u>"
            cells.append(cell)
        arrow = "↓" if LOWER_IS_BETTER[k] else "↑"
        lines.append(f"| {METRIC_LABELS[k]}{arrow} | " + " | ".join(cells) + " |")
    lines.append("| failures | " + " | ".join(str(failures[m]) for m in methods) + " |")
    n_pairs = len({r.pair_id for r in records})
    lines.append("")
    lines.append(f"{n_pairs} pairs. Bold: best, underline: second best, "
                 "*: better than every non-proposed method (paired t-test, p < 0.05).")
    return "\n".join(lines) + "\n"
