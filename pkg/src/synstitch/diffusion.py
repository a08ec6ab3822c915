"""Unconditional DDPM: schedule, U-Net noise predictor, training and sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .storage import load_checkpoint, save_checkpoint, write_loss_csv

log = logging.getLogger(__name__)


class DiffusionError(RuntimeError):
    pass


class SamplingDivergedError(DiffusionError):
    pass


@dataclass
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self):
        return len(self.beta)


def make_schedule(T, beta_lo, beta_hi):
    """Linearly spaced betas; ``alpha_bar`` is the running product of ``1 - beta``."""
    if T < 1 or not (0.0 < beta_lo <= beta_hi < 1.0):
        raise ValueError(f"invalid schedule T={T}, beta=({beta_lo}, {beta_hi})")
    beta = np.linspace(beta_lo, beta_hi, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def forward_diffuse(image, t, eps, schedule):
    """Closed-form noising ``sqrt(ab_t) I + sqrt(1 - ab_t) eps``.

    Works on numpy arrays (scalar ``t``) and on batched torch tensors, where
    ``t`` is a long tensor with one entry per batch item.
    """
    if tuple(image.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch {tuple(image.shape)} vs {tuple(eps.shape)}")
    if torch.is_tensor(image):
        t = torch.as_tensor(t, dtype=torch.long)
        if ((t < 0) | (t >= schedule.T)).any():
            raise ValueError(f"timestep outside [0, {schedule.T})")
        ab = torch.as_tensor(schedule.alpha_bar, dtype=image.dtype)[t]
        ab = ab.reshape(-1, *([1] * (image.dim() - 1)))
        return ab.sqrt() * image + (1 - ab).sqrt() * eps
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * image + math.sqrt(1.0 - ab) * eps


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb


def _groups(ch):
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass
class NetConfig:
    channels: tuple = (16, 32, 32)
    in_channels: int = 1
    temb_mult: int = 4


class Encoder(nn.Module):
    """Input conv, one residual block per level with stride-2 downsampling between, middle block.

    Factored out so the ControlNet branch can hold an exact trainable copy.
    """

    def __init__(self, cfg):
        super().__init__()
        ch = tuple(cfg.channels)
        self.temb_dim = cfg.temb_mult * ch[0]
        self.time_mlp = nn.Sequential(
            nn.Linear(self.temb_dim, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim))
        self.conv_in = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.down.append(ResBlock(prev, c, self.temb_dim))
            prev = c
            if i < len(ch) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = ResBlock(prev, prev, self.temb_dim)

    def embed(self, t, dtype):
        return self.time_mlp(timestep_embedding(t, self.temb_dim).to(dtype))

    def forward(self, x, emb, extra=None):
        h = self.conv_in(x)
        if extra is not None:
            h = h + extra
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        return skips, self.mid(h, emb)


class DenoiserNet(nn.Module):
    """U-Net noise predictor with optional residual hooks on the middle and decoder inputs.

    ``control`` is a list ``[skip_0, ..., skip_{L-1}, mid]`` of tensors added to
    the corresponding skip connections and the middle-block output.
    """

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        ch = tuple(self.cfg.channels)
        self.encoder = Encoder(self.cfg)
        temb = self.encoder.temb_dim
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        prev = ch[-1]
        for i in reversed(range(len(ch))):
            self.up.append(ResBlock(prev + ch[i], ch[i], temb))
            prev = ch[i]
            if i > 0:
                self.upsample.append(nn.Conv2d(ch[i], ch[i], 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(ch[0]), ch[0])
        self.conv_out = nn.Conv2d(ch[0], self.cfg.in_channels, 3, padding=1)

    @property
    def levels(self):
        return len(self.cfg.channels)

    def forward(self, x, t, control=None):
        emb = self.encoder.embed(t, x.dtype)
        skips, h = self.encoder(x, emb)
        if control is not None:
            skips = [s + c for s, c in zip(skips, control[:-1])]
            h = h + control[-1]
        for k, block in enumerate(self.up):
            h = block(torch.cat([h, skips[-1 - k]], dim=1), emb)
            if k < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[k](h)
        return self.conv_out(F.silu(self.norm_out(h)))


def dm_loss(net, batch, schedule, generator):
    """Monte-Carlo estimate of the noise-prediction loss on one batch.

    ``t`` is uniform over ``0..T-1`` and ``eps`` standard normal per item, both
    drawn from ``generator``.
    """
    t = torch.randint(0, schedule.T, (batch.shape[0],), generator=generator)
    eps = torch.randn(batch.shape, generator=generator, dtype=batch.dtype)
    x_t = forward_diffuse(batch, t, eps, schedule)
    return F.mse_loss(net(x_t, t), eps)


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    log_every: int = 50
    grad_clip: float = 1.0


def _loss_fn_default(model, batch, schedule, gen):
    return dm_loss(model, batch, schedule, gen)


def train_loop(model, params, data, schedule, cfg, loss_fn, ckpt_dir=None, meta=None,
               resume_from=None, stop_at=None):
    """Adam loop shared by the diffusion and ControlNet trainers.

    Batches are drawn with a numpy generator, noise with a torch generator;
    both states go into the checkpoint so a resumed run continues bit-for-bit.
    Returns the ``(step, loss)`` list.
    """
    if len(data) == 0:
        raise DiffusionError("empty training set")
    data = torch.as_tensor(np.asarray(data, dtype=np.float32))
    if data.dim() == 3:
        data = data[:, None]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    losses = []
    if resume_from is not None:
        m = load_checkpoint(resume_from, model, opt, gen, rng)
        step = m["step"]
        losses = [tuple(x) for x in m.get("losses", [])]
    model.train()
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    while step < end:
        idx = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
        loss = loss_fn(model, data[torch.as_tensor(idx)], schedule, gen)
        if not torch.isfinite(loss):
            raise DiffusionError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        step += 1
        losses.append((step, loss.item()))
        if step % cfg.log_every == 0:
            log.info("step %d loss %.5f", step, losses[-1][1])
    model.eval()
    if ckpt_dir is not None:
        m = dict(meta or {})
        m.update(step=step, train=asdict(cfg), losses=losses)
        save_checkpoint(ckpt_dir, model, m, opt, gen, rng)
        write_loss_csv(f"{ckpt_dir}/loss.csv", losses)
    return losses


def schedule_meta(schedule):
    return dict(T=schedule.T, beta_lo=float(schedule.beta[0]), beta_hi=float(schedule.beta[-1]))


def train_diffusion(net, dataset, cfg, schedule, ckpt_dir=None, resume_from=None, stop_at=None):
    meta = dict(kind="diffusion", net=asdict(net.cfg), schedule=schedule_meta(schedule))
    return train_loop(net, list(net.parameters()), dataset, schedule, cfg, _loss_fn_default,
                      ckpt_dir, meta, resume_from, stop_at)


def load_diffusion(ckpt_dir):
    from .storage import read_json
    meta = read_json(f"{ckpt_dir}/meta.json")
    net = DenoiserNet(NetConfig(**{**meta["net"], "channels": tuple(meta["net"]["channels"])}))
    load_checkpoint(ckpt_dir, net)
    net.eval()
    s = meta["schedule"]
    return net, make_schedule(s["T"], s["beta_lo"], s["beta_hi"]), meta


def smoothed(losses, window=50):
    v = np.array([l for _, l in losses], dtype=np.float64)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


@torch.no_grad()
def ddpm_sample(net, schedule, shape, generator, cond_hook=None, x_T=None):
    """Ancestral sampling with ``sigma_t^2 = beta_t``; output clamped to [0, 1].

    ``cond_hook(x_t, t)`` returns the control residual list for the network, or
    ``None``.  ``shape`` is ``(B, 1, H, W)``.
    """
    x = torch.randn(shape, generator=generator) if x_T is None else x_T.clone()
    for t in reversed(range(schedule.T)):
        tt = torch.full((shape[0],), t, dtype=torch.long)
        control = cond_hook(x, tt) if cond_hook is not None else None
        eps = net(x, tt, control)
        a, ab, b = schedule.alpha[t], schedule.alpha_bar[t], schedule.beta[t]
        x = (x - (b / math.sqrt(1.0 - ab)) * eps) / math.sqrt(a)
        if t > 0:
            x = x + math.sqrt(b) * torch.randn(shape, generator=generator, dtype=x.dtype)
        if not torch.isfinite(x).all():
            raise SamplingDivergedError(f"non-finite values at t={t}")
    return x.clamp(0.0, 1.0)
