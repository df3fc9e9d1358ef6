"""``evdistill`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 1 anything else raised by the package.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from evdistill import __version__, dirichlet, pipeline
from evdistill.config import default_config, load_config, merge, parse_overrides
from evdistill.errors import ConfigError, EvDistillError

log = logging.getLogger("evdistill")

# subcommand -> pipeline stages it runs
COMMANDS = {
    "make-data": ("data",),
    "fit-teacher": ("teacher",),
    "distill": ("students",),
    "eval": ("eval",),
    "ood": ("ood",),
    "bench": ("bench",),
    "alpha-sweep": ("sweep",),
    "pipeline": pipeline.STAGES,
}

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def setup_logging() -> None:
    name = os.environ.get("EVDISTILL_LOG", "warn").lower()
    if name not in _LEVELS:
        raise ConfigError(f"EVDISTILL_LOG must be one of {sorted(_LEVELS)}, got {name!r}")
    logging.basicConfig(level=_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("evdistill").setLevel(_LEVELS[name])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output root (default: runs/default)")
    common.add_argument("--force", action="store_true", help="rerun even if the manifest says up to date")
    common.add_argument("--dry-run", action="store_true", help="validate the configuration and exit")
    common.add_argument("--threads", type=int, help="worker threads for teacher inference")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable), e.g. --set distill.lr=0.001",
    )

    p = argparse.ArgumentParser(prog="evdistill", description="Distil weighted ensembles into single-pass students.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "make-data": "generate or ingest data and write train/val/test (+OOD) splits",
        "fit-teacher": "train ensemble members, fit BayesPE weights, cache predictions",
        "distill": "train the softmax and evidential students",
        "eval": "accuracy/ECE/NLL/Brier for teacher, students and untrained baselines",
        "ood": "uncertainty decomposition, W1 and AUROC on ID vs OOD data",
        "bench": "inference cost of teacher vs students",
        "alpha-sweep": "evaluate the evidential student under global alpha0 values",
        "pipeline": "run every stage in order",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    sg = sub.add_parser(
        "simplex-grid",
        parents=[common],
        help="Dirichlet density on a 3-class simplex grid (CSV)",
        description="Write barycentric coordinates and Dirichlet density on a triangular grid.",
    )
    sg.add_argument("--alpha", required=True, help="three comma-separated concentrations, e.g. 2,3,4")
    sg.add_argument("--resolution", type=int, default=60)
    return p


def resolve_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.overrides:
        cfg = merge(cfg, parse_overrides(args.overrides))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    return cfg.validate()


def _parse_alpha(text: str) -> np.ndarray:
    try:
        a = np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"--alpha must be comma-separated numbers, got {text!r}") from exc
    if a.shape != (3,):
        raise ConfigError("simplex-grid needs exactly three concentrations")
    return a


def run_simplex_grid(args, cfg) -> pipeline.StageResult:
    alpha = _parse_alpha(args.alpha)
    d = dirichlet.DirichletParams(alpha)
    if args.resolution < 1:
        raise ConfigError("--resolution must be >= 1")

    def body(out_dir: Path):
        return [dirichlet.write_simplex_grid_csv(out_dir / "grid.csv", d, args.resolution)]

    section = {"alpha": alpha.tolist(), "resolution": args.resolution}
    return pipeline._run_stage("simplex", args.out, cfg, section, [], body, args.force)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        cfg = resolve_config(args)
        if args.dry_run:
            stages = ("simplex",) if args.command == "simplex-grid" else COMMANDS[args.command]
            if args.command == "simplex-grid":
                _parse_alpha(args.alpha)
            print(json.dumps({"command": args.command, "stages": list(stages), "out": str(args.out), "config": cfg.to_dict()}, indent=2))
            return 0
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "simplex-grid":
            results = [run_simplex_grid(args, cfg)]
        else:
            results = pipeline.run_pipeline(cfg, args.out, args.force, COMMANDS[args.command])
        for r in results:
            state = "up to date" if r.skipped else f"done in {r.manifest.wall_clock_seconds:.2f}s"
            print(f"{r.stage}: {state} -> {r.directory}")
        return 0
    except EvDistillError as exc:
        print(f"evdistill: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
