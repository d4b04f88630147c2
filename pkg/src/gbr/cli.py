"""Command line entry point: ``gbr <command> [options]``.

Every stage is also a subcommand that reads its inputs from, and writes its
outputs to, the ``--out`` run directory, so a run can be split up or resumed.

Exit codes: 0 success, 2 configuration error, 3 input/output error,
4 numerical failure, 5 empty result.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import STAGES, PipelineConfig, load_config
from .errors import ConfigError, GBRError, LoadError, NumericalError

logger = logging.getLogger("gbr")

COMMANDS = {
    "synth": "generate a synthetic scene with ground truth",
    "align": "globally align the per-view point maps",
    "match": "extract reciprocal point-map matches",
    "ba": "bundle adjustment from point-map matches",
    "refine-depth": "scale-corrected refinement of the projected depth maps",
    "render": "render colour, depth and normals from the splat scene",
    "losses": "evaluate the supervision losses on real and pseudo views",
    "fuse": "TSDF fusion and mesh extraction",
    "eval": "metrics against ground truth, with figures",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", type=Path, help="scene directory (default: <out>/scene written by synth)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides [pipeline] seed)")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread limit; 0 keeps the library default")
    p.add_argument("--gt", type=Path, help="ground-truth directory (default: <out>/gt)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gbr", description="Geometry-supervised reconstruction from dense point maps.")
    parser.add_argument("--version", action="version", version=f"gbr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, text in COMMANDS.items():
        _common(sub.add_parser(name, help=text, description=text))
    run = sub.add_parser("run", help="run several stages in order", description="Run the listed stages in pipeline order.")
    _common(run)
    run.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    rep = sub.add_parser("report", help="re-render the figures of a finished run", description="Re-render figures into <out>/eval/figures.")
    _common(rep)
    return parser


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    # the logger passes INFO through so the JSON event log is complete; the console filters
    logger.setLevel(min(level, logging.INFO))
    for h in [h for h in logger.handlers if getattr(h, "_gbr_console", False)]:
        logger.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setLevel(level)
    h.setFormatter(logging.Formatter("%(levelname)-7s %(name)s: %(message)s"))
    h._gbr_console = True
    logger.addHandler(h)
    logger.propagate = False


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config is not None else PipelineConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 0:
            raise ConfigError("--threads must be non-negative")
        updates["threads"] = args.threads
    if getattr(args, "stages", None) is not None:
        updates["stages"] = args.stages
    if updates:
        cfg = cfg.with_overrides("pipeline", **updates)
    cfg.pipeline.stage_list()  # validates the stage names
    return cfg


def _print_summary(manifest: dict, stages: list[str]) -> None:
    # delimited output for scripts: stage<TAB>status<TAB>key=value;...
    for name in stages:
        entry = manifest.get("stages", {}).get(name, {})
        summary = entry.get("summary", {})
        fields = ";".join(f"{k}={_fmt(v)}" for k, v in sorted(summary.items()) if not isinstance(v, (dict, list)))
        print(f"{name}\t{entry.get('status', 'missing')}\t{fields}")


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _run(args) -> int:
    from .pipeline import Pipeline, RunContext, write_figures

    cfg = resolve_config(args)
    if args.command == "report":
        ctx = RunContext(cfg, args.out, args.scene or (args.out / "scene" if (args.out / "scene").is_dir() else None), args.gt or args.out / "gt")
        if not args.out.is_dir():
            raise LoadError(f"run directory {args.out} does not exist")
        for path in write_figures(ctx):
            print(f"figure\t{path}")
        return 0
    stages = cfg.pipeline.stage_list() if args.command == "run" else [args.command]
    pipe = Pipeline(cfg, args.out, args.scene, args.gt)
    manifest = pipe.run(stages)
    _print_summary(manifest, stages)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    try:
        return _run(args)
    except GBRError as exc:
        if not hasattr(exc, "stage"):  # stage failures were already logged by the pipeline
            logger.error("%s", exc)
        if exc.hint:
            logger.error("hint: %s", exc.hint)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s", exc)
        return LoadError.exit_code
    except ArithmeticError as exc:
        logger.error("numerical failure: %s", exc)
        return NumericalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
