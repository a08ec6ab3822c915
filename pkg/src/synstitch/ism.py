"""Affine stitching network trained on synthetic pairs with an image-space loss."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from . import geometry as geo
from .storage import load_checkpoint, read_json, save_checkpoint, write_json, write_loss_csv

log = logging.getLogger(__name__)

BACKBONES = ("global", "pairenc")


class ISMError(RuntimeError):
    pass


# --------------------------------------------------------- torch geometry --

def params_to_matrix_torch(p, center):
    """Batched ``T(c) T(t) R S Sh T(-c)`` from rows ``(tx, ty, theta, sx, sy, shear)``."""
    tx, ty, th, sx, sy, sh = p.unbind(-1)
    c, s = torch.cos(th), torch.sin(th)
    # linear part R @ diag(sx, sy) @ [[1, sh], [0, 1]]
    l00 = c * sx
    l01 = c * sx * sh - s * sy
    l10 = s * sx
    l11 = s * sx * sh + c * sy
    cx, cy = center
    ox = cx + tx - (l00 * cx + l01 * cy)
    oy = cy + ty - (l10 * cx + l11 * cy)
    zero, one = torch.zeros_like(tx), torch.ones_like(tx)
    return torch.stack([
        torch.stack([l00, l01, ox], -1),
        torch.stack([l10, l11, oy], -1),
        torch.stack([zero, zero, one], -1)], -2)


def warp_torch(img, m):
    """Differentiable counterpart of :func:`geometry.warp` (bilinear, zero fill).

    ``img`` is (B, C, H, W), ``m`` is (B, 3, 3).
    """
    b, _, h, w = img.shape
    inv = torch.linalg.inv(m)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=img.dtype), torch.arange(w, dtype=img.dtype), indexing="ij")
    sx = inv[:, 0, 0, None, None] * xs + inv[:, 0, 1, None, None] * ys + inv[:, 0, 2, None, None]
    sy = inv[:, 1, 0, None, None] * xs + inv[:, 1, 1, None, None] * ys + inv[:, 1, 2, None, None]
    grid = torch.stack([2 * sx / (w - 1) - 1, 2 * sy / (h - 1) - 1], dim=-1)
    return F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


# ------------------------------------------------------------ parameters --

@dataclass
class ParamNormalization:
    """Raw head outputs -> physical parameters; zero maps to the identity.

    ``tx, ty`` in half-widths, ``theta`` in units of pi/12, ``sx, sy`` as log
    scale, shear as is.
    """

    half_width: float
    half_height: float
    theta_unit: float = math.pi / 12

    def denormalize(self, raw):
        return torch.stack([
            raw[..., 0] * self.half_width,
            raw[..., 1] * self.half_height,
            raw[..., 2] * self.theta_unit,
            torch.exp(raw[..., 3]),
            torch.exp(raw[..., 4]),
            raw[..., 5]], -1)

    def normalize(self, phys):
        return torch.stack([
            phys[..., 0] / self.half_width,
            phys[..., 1] / self.half_height,
            phys[..., 2] / self.theta_unit,
            torch.log(phys[..., 3]),
            torch.log(phys[..., 4]),
            phys[..., 5]], -1)


# --------------------------------------------------------------- networks --

def _coords(b, h, w, dtype):
    ys, xs = torch.meshgrid(torch.linspace(-1, 1, h, dtype=dtype), torch.linspace(-1, 1, w, dtype=dtype),
                            indexing="ij")
    return torch.stack([xs, ys])[None].expand(b, 2, h, w)


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.GroupNorm(4, cout), nn.SiLU())


def _encoder(cin, widths):
    layers, prev = [], cin
    for i, wd in enumerate(widths):
        layers.append(_conv(prev, wd, 1 if i == 0 else 2))
        layers.append(_conv(wd, wd, 1))
        prev = wd
    return nn.Sequential(*layers)


class RegressorNet(nn.Module):
    """Predicts 6 normalized affine parameters for a (moving, fixed) pair.

    ``global``: both images plus coordinate channels through one strided
    encoder, global average pooling, dense head.  ``pairenc``: a shared encoder
    per image, pooled to a 4x4 grid, features concatenated into the head.
    """

    def __init__(self, kind="global", size=64, widths=(16, 32, 64, 64, 64), hidden=128):
        super().__init__()
        if kind not in BACKBONES:
            raise ValueError(f"unknown backbone {kind!r}")
        self.kind, self.size, self.widths, self.hidden = kind, size, tuple(widths), hidden
        if kind == "global":
            self.encoder = _encoder(4, widths)
            feat = widths[-1]
        else:
            self.encoder = _encoder(3, widths)
            feat = 2 * widths[-1] * 16
        self.head = nn.Sequential(nn.Linear(feat, hidden), nn.SiLU(), nn.Linear(hidden, 6))
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)
        self.norm = ParamNormalization(size / 2.0, size / 2.0)

    def config(self):
        return dict(kind=self.kind, size=self.size, widths=list(self.widths), hidden=self.hidden)

    def forward(self, moving, fixed):
        b, _, h, w = moving.shape
        xy = _coords(b, h, w, moving.dtype)
        if self.kind == "global":
            f = self.encoder(torch.cat([moving, fixed, xy], 1)).mean(dim=(2, 3))
        else:
            fm = F.adaptive_avg_pool2d(self.encoder(torch.cat([moving, xy], 1)), 4).flatten(1)
            ff = F.adaptive_avg_pool2d(self.encoder(torch.cat([fixed, xy], 1)), 4).flatten(1)
            f = torch.cat([fm, ff], 1)
        return self.head(f)

    def matrices(self, moving, fixed):
        """Physical affine matrices (B, 3, 3) for batched inputs."""
        h, w = moving.shape[-2:]
        phys = self.norm.denormalize(self(moving, fixed))
        return params_to_matrix_torch(phys, ((w - 1) / 2.0, (h - 1) / 2.0))


def _to_batch(x):
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


def predict_affine(net, moving, fixed):
    """Affine estimate for one numpy pair, as a float64 ``AffineTransform``."""
    moving = np.asarray(moving)
    if moving.shape != np.shape(fixed):
        raise ValueError("moving and fixed must have the same shape")
    net.eval()
    with torch.no_grad():
        raw = net(_to_batch(moving), _to_batch(fixed))[0].double()
    phys = net.norm.denormalize(raw).numpy()
    center = geo.image_center(moving.shape)
    return geo.params_to_matrix(dict(zip(geo.PARAM_NAMES, phys)), center)


def ism_forward(net, moving, fixed):
    """``(A_pred, warp(moving, A_pred))``; the warp is the numpy reference warp."""
    a = predict_affine(net, moving, fixed)
    return a, geo.warp(moving, a)


def ism_loss(net, moving, fixed, gt_matrices):
    """Mean squared difference between ``I(Phi(A'))`` and ``I(Phi(A))``.

    Batched torch inputs: images (B, 1, H, W), ground truth (B, 3, 3).
    """
    pred = warp_torch(moving, net.matrices(moving, fixed))
    target = warp_torch(moving, gt_matrices.to(moving.dtype))
    return F.mse_loss(pred, target)


def samples_to_tensors(samples):
    mov = torch.as_tensor(np.stack([s.moving for s in samples]).astype(np.float32))[:, None]
    fix = torch.as_tensor(np.stack([s.fixed for s in samples]).astype(np.float32))[:, None]
    gt = torch.as_tensor(np.stack([s.gt_affine.matrix for s in samples]).astype(np.float32))
    return mov, fix, gt


# ---------------------------------------------------------------- training --

@dataclass
class ISMConfig:
    steps: int = 4000
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 100
    patience: int = 10
    augment: bool = True
    weight_decay: float = 0.0


def _augment(mov, fix, gt, gen):
    """Horizontal mirror of a random half of the batch.

    Mirroring both images conjugates the ground truth by the same reflection,
    so labels stay exact.
    """
    b, _, h, w = mov.shape
    flip = torch.rand(b, generator=gen) < 0.5
    if not flip.any():
        return mov, fix, gt
    f = torch.eye(3, dtype=gt.dtype)
    f[0, 0] = -1.0
    f[0, 2] = w - 1.0
    mov = torch.where(flip[:, None, None, None], mov.flip(-1), mov)
    fix = torch.where(flip[:, None, None, None], fix.flip(-1), fix)
    gt = torch.where(flip[:, None, None], f @ gt @ f, gt)
    return mov, fix, gt


def train_ism(net, s_train, s_val, cfg, ckpt_dir=None, resume_from=None, stop_at=None, on_eval=None):
    """Adam on ``ism_loss`` with validation-based early stopping.

    The best-validation parameters are loaded into ``net`` at the end and
    written to ``ckpt_dir/params.bin``; the running state (for resume) lives in
    ``ckpt_dir/state``.  ``on_eval(step, net, val_loss)`` runs at every
    validation point.  Returns a dict with loss curves.
    """
    if not s_train:
        raise ISMError("empty training set")
    mov, fix, gt = samples_to_tensors(s_train)
    vmov, vfix, vgt = samples_to_tensors(s_val) if s_val else (mov[:0], fix[:0], gt[:0])
    params = [p for p in net.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    step, train_curve, val_curve = 0, [], []
    best_val, bad = math.inf, 0
    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    if resume_from is not None:
        m = load_checkpoint(Path(resume_from) / "state", net, opt, gen, rng)
        step, best_val, bad = m["step"], m["best_val"], m["bad"]
        train_curve = [tuple(x) for x in m["train_curve"]]
        val_curve = [tuple(x) for x in m["val_curve"]]
        best_net = RegressorNet(**net.config())
        load_checkpoint(resume_from, best_net)
        best_state = best_net.state_dict()
    end = cfg.steps if stop_at is None else min(cfg.steps, stop_at)
    stopped_early = False
    while step < end:
        net.train()
        idx = torch.as_tensor(rng.integers(0, len(mov), size=min(cfg.batch_size, len(mov))))
        bm, bf, bg = mov[idx], fix[idx], gt[idx]
        if cfg.augment:
            bm, bf, bg = _augment(bm, bf, bg, gen)
        loss = ism_loss(net, bm, bf, bg)
        if not torch.isfinite(loss):
            raise ISMError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        step += 1
        train_curve.append((step, loss.item()))
        if step % cfg.eval_every == 0 and len(vmov):
            net.eval()
            with torch.no_grad():
                v = float(ism_loss(net, vmov, vfix, vgt))
            val_curve.append((step, v))
            log.info("ism step %d train %.5f val %.5f", step, train_curve[-1][1], v)
            if on_eval is not None:
                on_eval(step, net, v)
            if v < best_val:
                best_val, bad = v, 0
                best_state = {k: t.clone() for k, t in net.state_dict().items()}
            else:
                bad += 1
                if bad >= cfg.patience:
                    stopped_early = True
                    break
    if not len(vmov):
        best_state = {k: t.clone() for k, t in net.state_dict().items()}
    if ckpt_dir is not None:
        ckpt = Path(ckpt_dir)
        save_checkpoint(ckpt / "state", net,
                        dict(step=step, best_val=best_val, bad=bad, train_curve=train_curve,
                             val_curve=val_curve), opt, gen, rng)
    net.load_state_dict(best_state)
    net.eval()
    if ckpt_dir is not None:
        save_checkpoint(ckpt, net, dict(kind="ism", net=net.config(), train=asdict(cfg), step=step,
                                        best_val=best_val, stopped_early=stopped_early))
        write_loss_csv(ckpt / "train_loss.csv", train_curve)
        write_loss_csv(ckpt / "val_loss.csv", val_curve)
    return dict(train=train_curve, val=val_curve, best_val=best_val, step=step)


def load_ism(ckpt_dir):
    meta = read_json(Path(ckpt_dir) / "meta.json")
    cfg = meta["net"]
    net = RegressorNet(cfg["kind"], cfg["size"], tuple(cfg["widths"]), cfg["hidden"])
    load_checkpoint(ckpt_dir, net)
    net.eval()
    return net, meta


# ---------------------------------------------------------------- stitching --

def stitch(net, moving, fixed, blend="average", a_pred=None, tau=0.0):
    """Composite of ``fixed`` and the registered ``moving`` on the fixed grid.

    The canvas is the union of the fixed FOV and the warped moving FOV;
    overlapping pixels are blended by ``average``, ``feather`` (distance-to-
    boundary weights) or ``max``.
    """
    if blend not in ("average", "feather", "max"):
        raise ValueError(f"unknown blend {blend!r}")
    if a_pred is None:
        a_pred = predict_affine(net, moving, fixed)
    fixed = np.asarray(fixed, dtype=np.float64)
    warped = geo.warp(moving, a_pred)
    m_f = geo.threshold_mask(fixed, tau).astype(bool)
    m_w = geo.warp_mask(geo.threshold_mask(moving, tau), a_pred).astype(bool)
    both = m_f & m_w
    comp = np.zeros_like(fixed)
    comp[m_f & ~m_w] = fixed[m_f & ~m_w]
    comp[m_w & ~m_f] = warped[m_w & ~m_f]
    weights = None
    if blend == "average":
        comp[both] = 0.5 * (fixed[both] + warped[both])
    elif blend == "max":
        comp[both] = np.maximum(fixed[both], warped[both])
    else:
        d_f = ndimage.distance_transform_edt(m_f)
        d_w = ndimage.distance_transform_edt(m_w)
        w_f = np.zeros_like(fixed)
        w_w = np.zeros_like(fixed)
        tot = d_f[both] + d_w[both]
        w_f[both] = d_f[both] / tot
        w_w[both] = d_w[both] / tot
        comp[both] = w_f[both] * fixed[both] + w_w[both] * warped[both]
        weights = (w_f, w_w)
    return dict(composite=comp, A_pred=a_pred, warped=warped, fixed_mask=m_f, moving_mask=m_w,
                weights=weights)


class ISMMethod:
    group = "proposed"

    def __init__(self, net, name=None):
        self.net = net
        self.name = name or f"ism-{net.kind}"

    def register(self, moving, fixed):
        return predict_affine(self.net, moving, fixed)


def save_stitch(out_dir, result, stem="stitch"):
    from PIL import Image
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.round(result["composite"] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(out / f"{stem}.png")
    write_json(out / f"{stem}_affine.json", result["A_pred"].to_dict())
