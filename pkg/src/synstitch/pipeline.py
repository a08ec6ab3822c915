"""Workflow stages behind the CLI; each reads a resolved config and writes artifacts."""

from __future__ import annotations

import csv
import logging
import math
import shutil
from pathlib import Path

import numpy as np
import torch

from . import baselines as bl
from . import diffusion as dd
from . import geometry as geo
from . import ism
from . import metrics as mt
from . import phantomgen as pg
from . import sspgm
from .config import ConfigError, ranges
from .storage import read_json, write_json

log = logging.getLogger(__name__)


class MissingArtifactError(ConfigError):
    """An upstream stage has not produced the files this stage needs."""


def _paths(cfg):
    p = cfg["paths"]
    out, ckpt = Path(p["out_dir"]), Path(p["ckpt_dir"])
    return dict(
        data=Path(p["data_dir"]), ckpt=ckpt, out=out,
        diffusion=ckpt / "diffusion", controlnet=ckpt / "controlnet",
        pairs=out / "pairs", eval=out / "eval", report=out / "report", stitch=out / "stitch",
    )


def ism_dir(cfg, kind):
    return _paths(cfg)["ckpt"] / f"ism-{kind}"


def output_dir(cfg, command):
    """Directory that receives a command's config.json and run.json."""
    p = _paths(cfg)
    return {
        "phantom-gen": p["data"], "train-diffusion": p["diffusion"], "train-controlnet": p["controlnet"],
        "gen-pairs": p["pairs"], "train-ism": p["ckpt"] / "ism", "stitch": p["stitch"],
        "eval": p["eval"], "report": p["report"],
    }.get(command)


def _require(path, what, command):
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} not found at {path}; run `synstitch {command}` first "
                                   "(with the same --profile/--out/--config)")


def _load_dataset(cfg):
    p = _paths(cfg)
    _require(p["data"] / "manifest.json", "phantom dataset", "phantom-gen")
    return pg.load_dataset(p["data"])


def _images(subjects, manifest, role, split):
    by_id = {s.subject_id: s for s in subjects}
    return np.stack([by_id[e["subject_id"]].frames[e["frame_index"]] for e in manifest.images(role, split)])


# ----------------------------------------------------------------- stages --

def phantom_gen(cfg):
    ph, seed = cfg["phantom"], cfg["seed"]
    subjects = pg.generate_cohort(ph["n_subjects"], ph["n_frames"], ph["size"], seed)
    manifest = pg.build_manifest(subjects, ph["ratios"], np.random.default_rng([seed, 1]),
                                 ph["n_eval_pairs"], ph["max_gap"])
    root = _paths(cfg)["data"]
    pg.save_dataset(root, subjects, manifest)
    return dict(subjects=len(subjects), split={k: len(v) for k, v in manifest.split.items()},
                eval_pairs=len(manifest.eval_pairs), data_dir=str(root))


def _net_config(cfg):
    d = cfg["diffusion"]
    return dd.NetConfig(channels=tuple(d["channels"]), in_channels=1, temb_mult=d["temb_mult"])


def _train_config(sect, seed):
    return dd.TrainConfig(steps=sect["steps"], lr=sect["lr"], batch_size=sect["batch_size"], seed=seed,
                          log_every=sect["log_every"], grad_clip=sect["grad_clip"])


def train_diffusion(cfg):
    subjects, manifest = _load_dataset(cfg)
    images = _images(subjects, manifest, "sspgm_train", "train")
    d = cfg["diffusion"]
    torch.manual_seed(cfg["seed"])
    net = dd.DenoiserNet(_net_config(cfg))
    schedule = dd.make_schedule(d["T"], d["beta_lo"], d["beta_hi"])
    out = _paths(cfg)["diffusion"]
    losses = dd.train_diffusion(net, images, _train_config(d, cfg["seed"]), schedule, out)
    sm = dd.smoothed(losses)
    return dict(images=len(images), steps=len(losses), ckpt=str(out),
                loss_first=float(sm[0]) if len(sm) else None, loss_last=float(sm[-1]) if len(sm) else None)


def _controlnet_config(cfg):
    c = cfg["controlnet"]
    return sspgm.ControlNetConfig(train=_train_config(c, cfg["seed"] + 1), ranges=ranges(c["ranges"]),
                                  min_overlap=c["min_overlap"], tau=c["tau"], mask_channel=c["mask_channel"])


def train_controlnet(cfg):
    p = _paths(cfg)
    _require(p["diffusion"] / "meta.json", "diffusion checkpoint", "train-diffusion")
    subjects, manifest = _load_dataset(cfg)
    images = _images(subjects, manifest, "sspgm_train", "train")
    base, schedule, _ = dd.load_diffusion(p["diffusion"])
    torch.manual_seed(cfg["seed"] + 1)
    ccfg = _controlnet_config(cfg)
    cn = sspgm.ControlNet(base, mask_channel=ccfg.mask_channel)
    h0 = sspgm.base_hash(cn)
    losses = sspgm.train_controlnet(cn, images, ccfg, schedule, p["controlnet"])
    if sspgm.base_hash(cn) != h0:
        raise RuntimeError("frozen base changed during ControlNet training")
    sm = dd.smoothed(losses)
    return dict(images=len(images), steps=len(losses), ckpt=str(p["controlnet"]), base_hash=h0,
                loss_first=float(sm[0]) if len(sm) else None, loss_last=float(sm[-1]) if len(sm) else None)


def condition_consistency(samples, n):
    """Mean absolute difference between the generated image and its condition inside ``M_c``."""
    vals = [float(np.abs(s.fixed - s.condition)[s.overlap_mask > 0].mean()) for s in samples[:n]]
    return float(np.mean(vals)), vals


def gen_pairs(cfg):
    p = _paths(cfg)
    pc = cfg["pairs"]
    subjects, manifest = _load_dataset(cfg)
    cn = schedule = None
    if pc["mode"] == "sspgm":
        _require(p["controlnet"] / "meta.json", "ControlNet checkpoint", "train-controlnet")
        cn, schedule, _ = sspgm.load_controlnet(p["controlnet"], p["diffusion"])
    kw = dict(gen_ranges=ranges(pc["ranges"]), min_overlap=pc["min_overlap"], tau=pc["tau"],
              batch_size=pc["batch_size"], mode=pc["mode"])
    seed = cfg["seed"]
    train = sspgm.gen_dataset(cn, _images(subjects, manifest, "curated", "train"), pc["K"], schedule,
                              np.random.default_rng([seed, 2]), out_dir=p["pairs"] / "train", **kw)
    result = dict(train=len(train), mode=pc["mode"])
    if pc["K_val"] > 0:
        val = sspgm.gen_dataset(cn, _images(subjects, manifest, "curated", "val"), pc["K_val"], schedule,
                                np.random.default_rng([seed, 3]), out_dir=p["pairs"] / "val", **kw)
        result["val"] = len(val)
    if pc["mode"] == "sspgm":
        mean, vals = condition_consistency(train, pc["consistency_samples"])
        write_json(p["pairs"] / "consistency.json", dict(mean_abs_diff=mean, n=len(vals), per_sample=vals))
        result["condition_mad"] = mean
    return result


def train_ism(cfg):
    p = _paths(cfg)
    _require(p["pairs"] / "train" / "pairs_manifest.json", "synthetic pairs", "gen-pairs")
    s_train = sspgm.load_pairs(p["pairs"] / "train")
    s_val = sspgm.load_pairs(p["pairs"] / "val") if (p["pairs"] / "val" / "pairs_manifest.json").exists() else []
    ic = cfg["ism"]
    size = s_train[0].moving.shape[0]
    out = {}
    for k, kind in enumerate(ic["backbones"]):
        torch.manual_seed(cfg["seed"] + 10 + k)
        net = ism.RegressorNet(kind, size, tuple(ic["widths"]), ic["hidden"])
        icfg = ism.ISMConfig(steps=ic["steps"], lr=ic["lr"], batch_size=ic["batch_size"], seed=cfg["seed"] + k,
                             eval_every=ic["eval_every"], patience=ic["patience"], augment=ic["augment"],
                             weight_decay=ic["weight_decay"])
        r = ism.train_ism(net, s_train, s_val, icfg, ism_dir(cfg, kind))
        out[kind] = dict(steps=r["step"], best_val=r["best_val"], ckpt=str(ism_dir(cfg, kind)))
    return out


def _ism_methods(cfg):
    methods = []
    for kind in cfg["ism"]["backbones"]:
        d = ism_dir(cfg, kind)
        if (d / "meta.json").exists():
            net, _ = ism.load_ism(d)
            methods.append(ism.ISMMethod(net))
    return methods


def baseline_methods(cfg):
    b = cfg["baselines"]
    icfg = bl.IntensityConfig(n_starts=b["n_starts"], iterations=b["iterations"], seed=cfg["seed"])
    out = [bl.IntensityMethod(m, icfg) for m in b["intensity_metrics"]]
    out.append(bl.FeatureMethod(k=b["feature_k"], mask_edges=b["mask_edges"], n_iter=b["ransac_iter"],
                                inlier_px=b["inlier_px"], seed=cfg["seed"]))
    out.append(bl.IdentityMethod())
    return out


def stitch(cfg):
    p = _paths(cfg)
    methods = _ism_methods(cfg)
    if not methods:
        raise MissingArtifactError(f"no ISM checkpoint under {p['ckpt']}; run `synstitch train-ism` first")
    subjects, manifest = _load_dataset(cfg)
    pairs = pg.make_eval_pairs(manifest, subjects, min(cfg["eval"]["n_stitch"], len(manifest.eval_pairs)))
    written = []
    for m in methods:
        for pair in pairs:
            r = ism.stitch(m.net, pair["moving"], pair["fixed"], cfg["eval"]["blend"])
            stem = f"{pair['pair_id']}_{m.name}"
            ism.save_stitch(p["stitch"], r, stem)
            written.append(stem)
    return dict(stitched=len(written), out=str(p["stitch"]))


def evaluate(cfg):
    p = _paths(cfg)
    subjects, manifest = _load_dataset(cfg)
    pairs = pg.make_eval_pairs(manifest, subjects, min(cfg["eval"]["n_pairs"], len(manifest.eval_pairs)))
    learned = _ism_methods(cfg)
    if not learned:
        log.warning("no trained ISM found; evaluating baselines only")
    methods = baseline_methods(cfg) + learned
    records, _ = mt.evaluate_all(methods, pairs, p["eval"], cfg["eval"]["masked"], cfg["eval"]["ssim_window"],
                                 jobs=cfg["jobs"])
    stats = mt.summarize(records)
    return dict(pairs=len(pairs), methods=[m.name for m in methods],
                kp_rmse={m: s["kp_rmse"][0] for m, s in stats.items()},
                failures=sum(r.status == "failed" for r in records))


def _read_curve(path):
    if not Path(path).exists():
        return []
    with open(path) as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


def report(cfg):
    from . import plotting

    p = _paths(cfg)
    _require(p["eval"] / "results.csv", "evaluation results", "eval")
    records = mt.read_results_csv(p["eval"] / "results.csv")
    groups = read_json(p["eval"] / "methods.json") if (p["eval"] / "methods.json").exists() else {}
    out = p["report"]
    figs = out / "figs"
    figs.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(p["eval"] / "results.csv", out / "results.csv")
    summary = mt.summary_markdown(records, groups)
    cons = p["pairs"] / "consistency.json"
    if cons.exists():
        c = read_json(cons)
        summary += (f"\nOutpainting condition consistency: mean |I_s - C_s| inside the condition mask "
                    f"= {c['mean_abs_diff']:.4f} over {c['n']} generated pairs.\n")
    (out / "summary.md").write_text(summary)

    stats = mt.summarize(records)
    with open(out / "metrics_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "mean", "std", "n"])
        for m, d in stats.items():
            for k in mt.METRIC_KEYS:
                mu, sd, n = d[k]
                w.writerow([m, k, repr(mu), repr(sd), n])

    plotting.metric_boxplots(records, figs / "metrics_boxplot.png")
    curves = {"diffusion": _read_curve(p["diffusion"] / "loss.csv"),
              "controlnet": _read_curve(p["controlnet"] / "loss.csv")}
    for kind in cfg["ism"]["backbones"]:
        curves[f"ism-{kind}"] = _read_curve(ism_dir(cfg, kind) / "train_loss.csv")
    curves = {k: v for k, v in curves.items() if v}
    if curves:
        plotting.loss_curves(curves, figs / "loss_curves.png")

    subjects, manifest = _load_dataset(cfg)
    n_fig = min(cfg["eval"]["n_figures"], len(manifest.eval_pairs))
    pairs = pg.make_eval_pairs(manifest, subjects, n_fig)
    methods = list(dict.fromkeys(r.method for r in records))
    n_written = 0
    for pair in pairs:
        for m in methods:
            tpath = p["eval"] / "transforms" / f"{m}_{pair['pair_id']}.json"
            if not tpath.exists():
                continue
            a = geo.AffineTransform.from_dict(read_json(tpath))
            rec = next(r for r in records if r.method == m and r.pair_id == pair["pair_id"])
            title = f"{pair['pair_id']} {m}: RMSE {rec.kp_rmse:.2f} px"
            plotting.contour_overlay(pair["moving"], pair["fixed"], a, figs / f"pair_{pair['pair_id']}_{m}.png",
                                     title, gt=pair["gt_affine"])
            n_written += 1
    return dict(figures=n_written + 1 + bool(curves), out=str(out),
                kp_rmse={m: s["kp_rmse"][0] for m, s in stats.items() if math.isfinite(s["kp_rmse"][0])})
