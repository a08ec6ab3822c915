"""Report figures: stitch contour overlays, loss curves, per-metric box plots."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import geometry as geo  # noqa: E402
from .metrics import LOWER_IS_BETTER, METRIC_KEYS, METRIC_LABELS  # noqa: E402

MOVING_COLOR = "yellow"
FIXED_COLOR = "deepskyblue"


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def contour_overlay(moving, fixed, a, path, title=None, gt=None):
    """Average-blended stitch with the registered moving FOV (yellow) and fixed FOV (blue).

    With ``gt`` the ground-truth registration is drawn next to the estimate.
    """
    panels = [("estimate", a)] + ([("ground truth", gt)] if gt is not None else [])
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4), squeeze=False)
    fixed = np.asarray(fixed, dtype=np.float64)
    m_f = geo.threshold_mask(fixed)
    for ax, (label, t) in zip(axes[0], panels):
        warped = geo.warp(moving, t)
        m_w = geo.warp_mask(geo.threshold_mask(moving), t)
        both = (m_f > 0) & (m_w > 0)
        comp = np.where(m_f > 0, fixed, 0.0) + np.where(m_w > 0, warped, 0.0)
        comp[both] *= 0.5
        ax.imshow(comp, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        if m_w.any():
            ax.contour(m_w, levels=[0.5], colors=MOVING_COLOR, linewidths=1.0)
        if m_f.any():
            ax.contour(m_f, levels=[0.5], colors=FIXED_COLOR, linewidths=1.0)
        ax.set_title(label, fontsize=9)
        ax.set_axis_off()
    if title:
        fig.suptitle(title, fontsize=10)
    return _save(fig, path)


def loss_curves(curves, path, title="training loss"):
    """``curves`` maps a label to ``[(step, loss), ...]``; log-scale y."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, pts in curves.items():
        if not pts:
            continue
        steps = np.array([p[0] for p in pts], dtype=float)
        vals = np.array([p[1] for p in pts], dtype=float)
        ax.plot(steps, vals, lw=0.6, alpha=0.35)
        if len(vals) >= 50:
            k = 50
            sm = np.convolve(vals, np.ones(k) / k, mode="valid")
            ax.plot(steps[k - 1:], sm, lw=1.4, label=f"{label} (50-step mean)", color=ax.lines[-1].get_color())
        else:
            ax.lines[-1].set_label(label)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=7)
    return _save(fig, path)


def metric_boxplots(records, path):
    """One panel per metric, one box per method, failed pairs excluded."""
    methods = list(dict.fromkeys(r.method for r in records))
    fig, axes = plt.subplots(1, len(METRIC_KEYS), figsize=(3.0 * len(METRIC_KEYS), 3.4))
    for ax, k in zip(axes, METRIC_KEYS):
        data = [[getattr(r, k) for r in records if r.method == m and math.isfinite(getattr(r, k))]
                for m in methods]
        ax.boxplot([d if d else [np.nan] for d in data], showfliers=True)
        ax.set_xticks(range(1, len(methods) + 1), methods, rotation=45, ha="right", fontsize=7)
        arrow = "lower is better" if LOWER_IS_BETTER[k] else "higher is better"
        ax.set_title(f"{METRIC_LABELS[k]} ({arrow})", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
