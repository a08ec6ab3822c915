"""Patch-conditioned ControlNet outpainting and synthetic stitching-pair generation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry as geo
from .diffusion import (DenoiserNet, TrainConfig, ddpm_sample, forward_diffuse, load_diffusion,
                        schedule_meta, train_loop)
from .storage import load_checkpoint, read_f32, read_json, tensor_hash, write_f32, write_json

log = logging.getLogger(__name__)

TRAIN_RANGES = dict(t=(-24.0, 24.0), theta=(-math.pi / 12, math.pi / 12), s=(0.9, 1.1))
GEN_RANGES = dict(t=(-8.0, 8.0), theta=(-math.pi / 24, math.pi / 24), s=(0.9, 1.1))


class NoValidAffineError(RuntimeError):
    pass


def zero_conv(cin, cout):
    conv = nn.Conv2d(cin, cout, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlNet(nn.Module):
    """Trainable encoder+middle copy of a frozen denoiser, wired through zero convolutions.

    The frozen base is stored outside the module's parameter tree so that
    ``parameters()`` and ``state_dict()`` cover only the trainable branch.
    """

    def __init__(self, base, mask_channel=False):
        super().__init__()
        object.__setattr__(self, "base", base)
        for p in base.parameters():
            p.requires_grad_(False)
        ch = tuple(base.cfg.channels)
        self.mask_channel = mask_channel
        cin = 2 if mask_channel else 1
        self.hint = nn.Sequential(
            nn.Conv2d(cin, ch[0], 3, padding=1), nn.SiLU(),
            nn.Conv2d(ch[0], ch[0], 3, padding=1), nn.SiLU())
        self.zero_in = zero_conv(ch[0], ch[0])
        self.copy = copy.deepcopy(base.encoder)
        for p in self.copy.parameters():
            p.requires_grad_(True)
        self.zero_out = nn.ModuleList([zero_conv(c, c) for c in ch] + [zero_conv(ch[-1], ch[-1])])

    def control(self, x_t, t, cond):
        """Residuals for the base's skips and middle block."""
        emb = self.copy.embed(t, x_t.dtype)
        skips, mid = self.copy(x_t, emb, extra=self.zero_in(self.hint(cond)))
        return [zc(h) for zc, h in zip(self.zero_out, skips + [mid])]

    def forward(self, x_t, t, cond):
        return self.base(x_t, t, self.control(x_t, t, cond))


def as_condition(c, mask=None, mask_channel=False):
    """Stack condition images into the network's input layout."""
    c = torch.as_tensor(np.asarray(c, dtype=np.float32))
    if c.dim() == 2:
        c = c[None]
    c = c[:, None]
    if mask_channel:
        m = torch.as_tensor(np.asarray(mask, dtype=np.float32)).reshape(c.shape)
        c = torch.cat([c, m], dim=1)
    return c


def controlnet_forward(cn, x_t, t, cond):
    if x_t.shape[-2:] != cond.shape[-2:] or x_t.shape[0] != cond.shape[0]:
        raise ValueError(f"shape mismatch {tuple(x_t.shape)} vs {tuple(cond.shape)}")
    return cn(x_t, t, cond)


def op_loss(cn, images, conds, schedule, generator):
    """Outpainting loss: the ``dm_loss`` draw order, with the condition fed to the ControlNet."""
    t = torch.randint(0, schedule.T, (images.shape[0],), generator=generator)
    eps = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    x_t = forward_diffuse(images, t, eps, schedule)
    return F.mse_loss(controlnet_forward(cn, x_t, t, conds), eps)


def base_hash(cn):
    return tensor_hash(dict(cn.base.state_dict()))


@dataclass
class ControlNetConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    ranges: dict = field(default_factory=lambda: dict(TRAIN_RANGES))
    min_overlap: float = 0.3
    tau: float = 0.0
    mask_channel: bool = False


def _condition_sampler(cfg, size):
    center = geo.image_center((size, size))

    def draw(images, rng):
        conds, masks = [], []
        for img in images:
            for _ in range(100):
                a = geo.sample_affine(cfg.ranges, rng, center)
                try:
                    c, mc = geo.condition_train(img, a, cfg.tau)
                except geo.NoOverlapError:
                    continue
                if geo.overlap_fraction(mc, geo.threshold_mask(img, cfg.tau)) >= cfg.min_overlap:
                    break
            else:
                c, mc = geo.condition_train(img, geo.AffineTransform.identity(center), cfg.tau)
            conds.append(c)
            masks.append(mc)
        return np.stack(conds), np.stack(masks)

    return draw


def train_controlnet(cn, dataset, cfg, schedule, ckpt_dir=None, resume_from=None, stop_at=None):
    """Optimize only the ControlNet branch; conditions are drawn on the fly per batch.

    Condition affines come from a numpy generator derived from the training
    seed and advance with the step counter, so resume is exact.
    """
    images = np.asarray(dataset, dtype=np.float32)
    draw = _condition_sampler(cfg, images.shape[-1])
    state = {"step": 0}

    def loss_fn(model, batch, sched, gen):
        # per-step stream: independent of batch history, reproducible on resume
        rng = np.random.default_rng([cfg.train.seed + 1, state["step"]])
        state["step"] += 1
        conds, masks = draw(batch[:, 0].numpy(), rng)
        c = as_condition(conds, masks, cfg.mask_channel)
        return op_loss(model, batch, c, sched, gen)

    if resume_from is not None:
        state["step"] = read_json(Path(resume_from) / "meta.json")["step"]
    meta = dict(kind="controlnet", net=asdict(cn.base.cfg), schedule=schedule_meta(schedule),
                ranges={k: list(v) for k, v in cfg.ranges.items()}, min_overlap=cfg.min_overlap,
                tau=cfg.tau, mask_channel=cfg.mask_channel, base_hash=base_hash(cn))
    return train_loop(cn, [p for p in cn.parameters() if p.requires_grad], images, schedule,
                      cfg.train, loss_fn, ckpt_dir, meta, resume_from, stop_at)


def load_controlnet(ckpt_dir, base_dir):
    base, schedule, _ = load_diffusion(base_dir)
    meta = read_json(Path(ckpt_dir) / "meta.json")
    cn = ControlNet(base, mask_channel=meta.get("mask_channel", False))
    load_checkpoint(ckpt_dir, cn)
    cn.eval()
    return cn, schedule, meta


def outpaint(cn, conds, schedule, generator, masks=None):
    """Sample images whose content agrees with ``conds`` inside their masks.

    ``conds`` is an (H, W) image or a (B, H, W) stack; returns the same layout.
    """
    single = np.ndim(conds) == 2
    c = as_condition(conds, masks, cn.mask_channel)
    cn.eval()
    with torch.no_grad():
        out = ddpm_sample(cn.base, schedule, tuple(c.shape[:1]) + (1,) + tuple(c.shape[2:]), generator,
                          cond_hook=lambda x, t: cn.control(x, t, c))
    out = out[:, 0].numpy().astype(np.float64)
    return out[0] if single else out


@dataclass
class StitchSample:
    moving: np.ndarray
    fixed: np.ndarray
    gt_affine: geo.AffineTransform
    condition: np.ndarray
    overlap: float
    overlap_mask: np.ndarray | None = None


def draw_pair_affine(image, gen_ranges, rng, min_overlap=0.3, tau=0.0, max_attempts=100):
    """Rejection-sample an affine whose FOV overlap with ``image`` is large enough."""
    center = geo.image_center(image.shape)
    m = geo.threshold_mask(image, tau)
    for _ in range(max_attempts):
        a = geo.sample_affine(gen_ranges, rng, center)
        try:
            cs, mc, _ = geo.condition_infer(image, a, tau)
        except geo.NoOverlapError:
            continue
        ov = geo.overlap_fraction(mc, m)
        if ov >= min_overlap:
            return a, cs, mc, ov
    raise NoValidAffineError(f"no affine with overlap >= {min_overlap} in {max_attempts} attempts")


def gen_stitch_pair(cn, image, schedule, rng, gen_ranges=None, min_overlap=0.3, tau=0.0):
    """One synthetic pair ``(I, I_s, A)``; ``I_s`` is cut to the FOV of ``I``."""
    a, cs, mc, ov = draw_pair_affine(image, gen_ranges or GEN_RANGES, rng, min_overlap, tau)
    gen = torch.Generator().manual_seed(int(rng.integers(2**63 - 1)))
    fixed = outpaint(cn, cs, schedule, gen, mc) * geo.threshold_mask(image, tau)
    return StitchSample(np.asarray(image, dtype=np.float64), fixed, a, cs, ov, mc)


def warp_only_pair(image, rng, gen_ranges=None, min_overlap=0.3, tau=0.0):
    """Ablation pair with ``I_s = warp(I, A)``; no generative model involved."""
    a, cs, mc, ov = draw_pair_affine(image, gen_ranges or GEN_RANGES, rng, min_overlap, tau)
    return StitchSample(np.asarray(image, dtype=np.float64), geo.warp(image, a), a, cs, ov, mc)


def gen_dataset(cn, curated, K, schedule, rng, gen_ranges=None, min_overlap=0.3, tau=0.0,
                batch_size=32, out_dir=None, mode="sspgm"):
    """Generate ``K`` samples cycling through ``curated`` images.

    All affines are drawn first, then outpainting runs in fixed-size batches;
    the result depends only on ``rng``'s state and the inputs.  ``mode`` is
    ``sspgm`` or ``warp`` (diffusion bypassed).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    gen_ranges = gen_ranges or GEN_RANGES
    drawn = []
    for k in range(K):
        img = np.asarray(curated[k % len(curated)], dtype=np.float64)
        drawn.append((img, *draw_pair_affine(img, gen_ranges, rng, min_overlap, tau)))
    samples = []
    if mode == "warp":
        samples = [StitchSample(img, geo.warp(img, a), a, cs, ov, mc) for img, a, cs, mc, ov in drawn]
    else:
        gen = torch.Generator().manual_seed(int(rng.integers(2**63 - 1)))
        for start in range(0, K, batch_size):
            chunk = drawn[start:start + batch_size]
            outs = outpaint(cn, np.stack([d[2] for d in chunk]), schedule, gen,
                            np.stack([d[3] for d in chunk]))
            for (img, a, cs, mc, ov), o in zip(chunk, outs):
                samples.append(StitchSample(img, o * geo.threshold_mask(img, tau), a, cs, ov, mc))
    if out_dir is not None:
        save_pairs(out_dir, samples, dict(mode=mode, min_overlap=min_overlap,
                                          gen_ranges={k: list(v) for k, v in gen_ranges.items()}))
    return samples


def save_pairs(out_dir, samples, info=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = samples[0].moving.shape
    items = []
    for k, s in enumerate(samples):
        write_f32(out / f"moving_{k}.f32", s.moving)
        write_f32(out / f"fixed_{k}.f32", s.fixed)
        write_f32(out / f"cond_{k}.f32", s.condition)
        write_json(out / f"affine_{k}.json", s.gt_affine.to_dict())
        items.append(dict(index=k, moving=f"moving_{k}.f32", fixed=f"fixed_{k}.f32",
                          cond=f"cond_{k}.f32", affine=f"affine_{k}.json", overlap=s.overlap))
    write_json(out / "pairs_manifest.json", dict(height=h, width=w, count=len(samples),
                                                  info=info or {}, samples=items))


def load_pairs(out_dir):
    out = Path(out_dir)
    doc = read_json(out / "pairs_manifest.json")
    shape = (doc["height"], doc["width"])
    samples = []
    for it in doc["samples"]:
        a = geo.AffineTransform.from_dict(read_json(out / it["affine"]))
        samples.append(StitchSample(
            read_f32(out / it["moving"], shape).astype(np.float64),
            read_f32(out / it["fixed"], shape).astype(np.float64),
            a, read_f32(out / it["cond"], shape).astype(np.float64), it["overlap"]))
    return samples
