"""Command-line pipeline driver.

Every stage is a subcommand over a shared working directory. Flags
override the config file, which overrides the numeric profile. Logs go
to stderr; machine-readable outputs are files in the workdir.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import autodiff as ad
from .config import ConfigError, build_config, effective_text
from .network import IngestError
from .pipeline import (
    MissingArtifactError,
    SynthSpec,
    run_pipeline,
    stage_eval,
    stage_fuse,
    stage_mixhop,
    stage_preprocess,
    stage_synth,
    stage_train_spatial,
    stage_train_temporal,
    stage_transfer,
    workdir_lock,
)

log = logging.getLogger("roadrep")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4

OVERRIDE_FIELDS = [
    # (flag, dest, type)
    ("--roads", "roads", str),
    ("--edges", "edges", str),
    ("--trajectories", "trajectories", str),
    ("--d", "d", int),
    ("--d-t", "d_t", int),
    ("--d-f", "d_f", int),
    ("--epochs-spatial", "epochs_spatial", int),
    ("--epochs-temporal", "epochs_temporal", int),
    ("--batch-contrastive", "batch_contrastive", int),
    ("--batch-traffic", "batch_traffic", int),
    ("--lr", "lr", float),
    ("--lambda-reg", "lambda_reg", float),
    ("--lambda-cls", "lambda_cls", float),
    ("--temperature", "temperature", float),
    ("--k-zones", "k_zones", int),
    ("--radius-m", "radius_m", float),
    ("--fusion-mode", "mode", str),
]

FLAG_FIELDS = ["no_mixhop", "no_hg1", "no_hg2", "no_hg3", "no_tm",
               "freeze_mixhop", "raw_degrees", "bidirectional"]


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=str, default=None, help="config file (INI sections)")
    parser.add_argument("--workdir", type=str, default=None,
                        help="artifact directory (or env DST_WORKDIR)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--profile", choices=("desk", "paper"), default="desk")
    for flag, dest, kind in OVERRIDE_FIELDS:
        parser.add_argument(flag, dest=dest, type=kind, default=None)
    for name in FLAG_FIELDS:
        parser.add_argument("--" + name.replace("_", "-"), dest=name,
                            action="store_const", const=True, default=None)


def _add_synth_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--rows", type=int, default=7)
    parser.add_argument("--cols", type=int, default=7)
    parser.add_argument("--rings", type=int, default=2)
    parser.add_argument("--traj-count", type=int, default=240)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadrep",
        description="road network representation pipeline: synthesize or ingest a city, "
                    "pre-train both branches, fuse, and evaluate downstream tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, needs_synth in [
        ("synth", True), ("preprocess", False), ("mixhop", False),
        ("train-spatial", False), ("train-temporal", False),
        ("fuse", False), ("eval", False), ("pipeline", True),
    ]:
        p = sub.add_parser(name)
        _add_common(p)
        if needs_synth:
            _add_synth_flags(p)
        if name in ("train-spatial", "pipeline"):
            p.add_argument("--hyper-positives", action="store_true", default=False)
            p.add_argument("--no-projection", action="store_true", default=False)

    p = sub.add_parser("transfer", help="evaluate frozen encoders on an unseen city")
    _add_common(p)
    p.add_argument("--target-roads", required=True)
    p.add_argument("--target-edges", required=True)
    p.add_argument("--target-trajectories", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _config_from_args(args) -> tuple:
    overrides = {dest: getattr(args, dest) for _, dest, _ in OVERRIDE_FIELDS}
    overrides.update({name: getattr(args, name) for name in FLAG_FIELDS})
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workdir is not None:
        overrides["workdir"] = args.workdir
    cfg = build_config(profile=args.profile, file_path=args.config, overrides=overrides)
    workdir = cfg.workdir or os.environ.get("DST_WORKDIR", "")
    if not workdir:
        raise ConfigError("no workdir: pass --workdir, set [paths] workdir, or DST_WORKDIR")
    cfg.workdir = workdir
    return cfg, Path(workdir)


def _run_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed)
    failed = False
    for name, err in results.items():
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{status:4s} {name:35s} max_rel_err={err:.3e}", file=sys.stderr)
        failed |= err >= args.tolerance
    print(f"worst max_rel_err={max(results.values()):.3e} "
          f"({'FAIL' if failed else 'all ok'})", file=sys.stderr)
    return EXIT_NUMERICAL if failed else EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "gradcheck":
        return _run_gradcheck(args)

    try:
        cfg, work = _config_from_args(args)
    except (ConfigError, IngestError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG

    spec = None
    if args.command in ("synth", "pipeline"):
        spec = SynthSpec(rows=args.rows, cols=args.cols, rings=args.rings,
                         count=args.traj_count)

    try:
        with workdir_lock(work):
            (work / "effective_config.txt").write_text(effective_text(cfg), encoding="utf-8")
            if args.command == "synth":
                stage_synth(work, cfg, spec)
            elif args.command == "preprocess":
                stage_preprocess(work, cfg)
            elif args.command == "mixhop":
                stage_mixhop(work, cfg)
            elif args.command == "train-spatial":
                stage_train_spatial(work, cfg, args.hyper_positives, args.no_projection)
            elif args.command == "train-temporal":
                stage_train_temporal(work, cfg)
            elif args.command == "fuse":
                stage_fuse(work, cfg)
            elif args.command == "eval":
                stage_eval(work, cfg)
            elif args.command == "transfer":
                stage_transfer(work, cfg, args.target_roads, args.target_edges,
                               args.target_trajectories)
            elif args.command == "pipeline":
                run_pipeline(work, cfg, spec, args.hyper_positives, args.no_projection)
    except MissingArtifactError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except ad.NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (ConfigError, IngestError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
