"""
Command-Line Entry Point
========================

    optctrl optimize     search control points, write a FitReport
    optctrl baseline     fps | random | exhaustive, same report schema
    optctrl deform       apply a report's control points to new positions
    optctrl gen-targets  synthetic hinge-bend target directory
    optctrl bench        naive vs fast evaluation and search timings

Exit codes: 0 success, 2 usage/config error, 3 input parse error,
4 numerical failure.
"""
import argparse
import logging
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import ValidationError

from optctrl import __version__
from optctrl.commands.bench import cmd_bench
from optctrl.commands.deform import cmd_deform
from optctrl.commands.optimize import cmd_optimize
from optctrl.commands.targets import cmd_gen_targets
from optctrl.config import get_settings
from optctrl.exceptions import ConfigError, OptCtrlError
from optctrl.schemas import DISTANCE_FLAGS, RunConfig

logger = logging.getLogger(__name__)

LOG_FORMAT = "[optctrl] %(levelname)s %(name)s: %(message)s"

# Keys a --config file may set, with the RunConfig field each maps to
CONFIG_KEYS = {
    "template": "template",
    "targets": "targets",
    "out": "out",
    "k": "k",
    "epsilon": "epsilon",
    "seed": "seed",
    "passes": "passes",
    "distance": "distance",
    "method": "method",
    "trials": "trials",
    "cache_dir": "cache_dir",
    "cache-dir": "cache_dir",
    "normalize": "normalize",
    "no_timings": "no_timings",
    "no-timings": "no_timings",
}


def configure_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger("optctrl")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


# =============================================================================
# PARSER
# =============================================================================

def _add_run_flags(parser: argparse.ArgumentParser, methods: List[str]) -> None:
    parser.add_argument("--config", type=Path, help="TOML file with run options (flags win)")
    parser.add_argument("--template", type=Path, help="Medit (.mesh) template")
    parser.add_argument("--targets", type=Path, help="directory of .xyz targets")
    parser.add_argument("--out", type=Path, help="report path (.json)")
    parser.add_argument("--k", type=int, help="number of control points")
    parser.add_argument("--epsilon", type=float, help="regularization (default 1e-8 * trace(A) / N)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--passes", type=int)
    parser.add_argument("--method", choices=methods)
    parser.add_argument("--trials", type=int, help="random baseline subsets (default N*K)")
    parser.add_argument("--distance", choices=sorted(DISTANCE_FLAGS))
    parser.add_argument("--cache-dir", type=Path, help="inverse cache directory")
    parser.add_argument("--no-normalize", action="store_true", default=None, help="skip unit-sphere normalization")
    parser.add_argument("--no-timings", action="store_true", default=None, help="write zero timings (byte-stable reports)")


def create_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="optctrl", description="Data-driven control point selection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    optimize = commands.add_parser("optimize", parents=[common], help="search control points")
    _add_run_flags(optimize, ["optctrl", "fps", "random", "exhaustive"])

    baseline = commands.add_parser("baseline", parents=[common], help="run a baseline method")
    _add_run_flags(baseline, ["fps", "random", "exhaustive"])

    deform = commands.add_parser("deform", parents=[common], help="deform a template with a report's control points")
    deform.add_argument("--template", type=Path, required=True)
    deform.add_argument("--report", type=Path, required=True)
    deform.add_argument("--positions", type=Path, required=True, help=".xyz with K control positions or a full N-row target")
    deform.add_argument("--out", type=Path, required=True, help="deformed surface (.obj); error map goes next to it as .csv")
    deform.add_argument("--epsilon", type=float)
    deform.add_argument("--cache-dir", type=Path)
    deform.add_argument("--no-normalize", action="store_true")
    deform.add_argument("--weights-out", type=Path, help="also write the N x K weights")

    targets = commands.add_parser("gen-targets", parents=[common], help="generate hinge-bend targets")
    source = targets.add_mutually_exclusive_group(required=True)
    source.add_argument("--template", type=Path)
    source.add_argument("--bar", type=int, nargs=3, metavar=("NX", "NY", "NZ"), help="use the bar fixture")
    targets.add_argument("--out", type=Path, required=True, help="output directory")
    targets.add_argument("--m", type=int, default=50, help="number of targets")
    targets.add_argument("--seed", type=int, default=0)
    targets.add_argument("--hinge-position", type=float, default=0.5, help="fraction along x of the default hinge")
    targets.add_argument("--hinge-point", type=float, nargs=3)
    targets.add_argument("--hinge-normal", type=float, nargs=3, default=(1.0, 0.0, 0.0))
    targets.add_argument("--hinge-axis", type=float, nargs=3)
    targets.add_argument("--falloff", type=float, help="blend band width (default 10%% of bbox diagonal)")
    targets.add_argument("--angle-min", type=float, default=-np.pi / 4)
    targets.add_argument("--angle-max", type=float, default=np.pi / 4)
    targets.add_argument("--no-normalize", action="store_true")

    bench = commands.add_parser("bench", parents=[common], help="time naive vs fast evaluation")
    instance = bench.add_mutually_exclusive_group()
    instance.add_argument("--bar", type=int, nargs=3, metavar=("NX", "NY", "NZ"), help="bar fixture (default 24 4 4)")
    instance.add_argument("--template", type=Path, help="bench on this template instead")
    bench.add_argument("--k", type=int, default=8)
    bench.add_argument("--m", type=int, default=20)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--trials", type=int, help="random baseline subsets (default N*K)")
    bench.add_argument("--skip-search", action="store_true")
    bench.add_argument("--out", type=Path, help="machine-readable report (.json)")

    return parser


# =============================================================================
# RUN CONFIG
# =============================================================================

def load_config_file(path: Path) -> Dict[str, Any]:
    """Flat TOML table of run options; an [optctrl] table is also accepted."""
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None

    data = data.get("optctrl", data)
    values = {}
    for key, value in data.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}: unknown option {key!r}")
        values[CONFIG_KEYS[key]] = value
    return values


def build_run_config(args: argparse.Namespace, default_method: str) -> RunConfig:
    values = load_config_file(args.config) if args.config is not None else {}

    flags = {
        "template": args.template,
        "targets": args.targets,
        "out": args.out,
        "k": args.k,
        "epsilon": args.epsilon,
        "seed": args.seed,
        "passes": args.passes,
        "distance": args.distance,
        "method": args.method,
        "trials": args.trials,
        "cache_dir": args.cache_dir,
        "normalize": False if args.no_normalize else None,
        "no_timings": args.no_timings,
    }
    values.update({key: value for key, value in flags.items() if value is not None})
    values.setdefault("method", default_method)
    if "distance" in values:
        values["distance"] = DISTANCE_FLAGS.get(values["distance"], values["distance"])

    missing = [name for name in ("template", "targets", "out", "k") if name not in values]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join(f"--{name}" for name in missing))
    if values["method"] == "optctrl" and args.command == "baseline":
        raise ConfigError("baseline runs fps, random or exhaustive; use `optimize` for the search")

    try:
        return RunConfig(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"invalid {where}: {first['msg']}") from None


# =============================================================================
# DISPATCH
# =============================================================================

def run(args: argparse.Namespace) -> None:
    settings = get_settings()

    if args.command in ("optimize", "baseline"):
        cfg = build_run_config(args, "optctrl" if args.command == "optimize" else "fps")
        cmd_optimize(cfg, threads=settings.threads)
        print(cfg.out)

    elif args.command == "deform":
        cmd_deform(
            args.template,
            args.report,
            args.positions,
            args.out,
            epsilon=args.epsilon,
            cache_dir=args.cache_dir,
            normalize=not args.no_normalize,
            weights_out=args.weights_out,
        )
        print(args.out)

    elif args.command == "gen-targets":
        written = cmd_gen_targets(
            args.out,
            args.m,
            args.seed,
            template=args.template,
            bar=args.bar,
            hinge_position=args.hinge_position,
            hinge_point=tuple(args.hinge_point) if args.hinge_point else None,
            hinge_normal=tuple(args.hinge_normal),
            hinge_axis=tuple(args.hinge_axis) if args.hinge_axis else None,
            falloff=args.falloff,
            angle_range=(args.angle_min, args.angle_max),
            normalize=not args.no_normalize,
        )
        print(f"{len(written)} targets in {args.out}")

    elif args.command == "bench":
        _, table = cmd_bench(
            args.bar or (24, 4, 4),
            args.k,
            args.m,
            args.repeats,
            args.seed,
            random_trials=args.trials,
            skip_search=args.skip_search,
            threads=settings.threads,
            template=args.template,
            out=args.out,
        )
        print(table, end="")


def main(argv: Optional[List[str]] = None) -> int:
    args = create_parser().parse_args(argv)
    try:
        settings = get_settings()
        configure_logging("DEBUG" if args.verbose or settings.debug else settings.log_level)
        run(args)
    except OptCtrlError as exc:
        if not logging.getLogger("optctrl").handlers:
            configure_logging("INFO")
        logger.error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
