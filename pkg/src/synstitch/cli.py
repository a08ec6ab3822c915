"""Command-line entry point: ``synstitch <command> [--config F] [--profile P] [--seed N] [--jobs N] [--out D]``.

Exit codes: 0 success, 1 configuration or missing-upstream error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import platform
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from . import pipeline
from .config import PROFILES, ConfigError, config_hash, resolve
from .storage import write_json

log = logging.getLogger("synstitch")

COMMANDS = {
    "phantom-gen": (pipeline.phantom_gen, "generate the phantom cohort, split manifest and eval pairs"),
    "train-diffusion": (pipeline.train_diffusion, "train the unconditional denoiser"),
    "train-controlnet": (pipeline.train_controlnet, "train the patch-conditioned branch on a frozen denoiser"),
    "gen-pairs": (pipeline.gen_pairs, "outpaint synthetic stitching pairs with known affines"),
    "train-ism": (pipeline.train_ism, "train the stitching regressors on the synthetic pairs"),
    "stitch": (pipeline.stitch, "stitch held-out frame pairs with the trained regressors"),
    "eval": (pipeline.evaluate, "register the eval pairs with every method and score them"),
    "report": (pipeline.report, "write summary tables and figures from the eval results"),
    "selftest": (None, "run the built-in oracle checks"),
}


def _git_revision():
    try:
        r = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                           cwd=Path(__file__).resolve().parent)
        return r.stdout.strip() or None if r.returncode == 0 else None
    except (OSError, subprocess.SubprocessError):
        return None


def _versions():
    import matplotlib
    import numpy
    import scipy
    import torch
    return dict(python=platform.python_version(), synstitch=__version__, numpy=numpy.__version__,
                scipy=scipy.__version__, torch=torch.__version__, matplotlib=matplotlib.__version__)


def build_parser():
    p = argparse.ArgumentParser(prog="synstitch", description="Synthetic-pair image stitching workflow.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("--config", type=Path, help="JSON file overriding profile defaults")
        s.add_argument("--profile", choices=PROFILES, help="named defaults (default: desk32)")
        s.add_argument("--seed", type=int, help="master seed")
        s.add_argument("--jobs", type=int, help="worker processes for evaluation")
        s.add_argument("--out", type=Path, help="run directory (default: runs/<profile>)")
        s.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "selftest":
        from . import selftest
        return 0 if selftest.run() else 2

    try:
        cfg = resolve(args.config, args.profile, args.seed, args.jobs, args.out)
    except ConfigError as exc:
        print(f"synstitch: config error: {exc}", file=sys.stderr)
        return 1
    fn = COMMANDS[args.command][0]
    out_dir = Path(pipeline.output_dir(cfg, args.command))
    t0 = time.perf_counter()
    try:
        result = fn(cfg)
    except ConfigError as exc:
        print(f"synstitch {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any stage failure maps to exit 2
        log.exception("stage failed")
        print(f"synstitch {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "config.json", cfg)
    write_json(out_dir / "run.json", dict(
        command=args.command, argv=argv, seed=cfg["seed"], profile=cfg["profile"],
        config_hash=config_hash(cfg), git_revision=_git_revision(),
        wall_time_s=round(time.perf_counter() - t0, 3), versions=_versions(), result=result))
    print(f"synstitch {args.command}: done in {time.perf_counter() - t0:.1f}s -> {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
