"""Command-line entry point.

    onlinesplat synth  --out DIR            write a synthetic sequence in TUM layout
    onlinesplat run    [--method E] ...     run the online mapper, write report/map/renders
    onlinesplat sweep  ...                  uncertainty-weight sweep
    onlinesplat render --ply MAP --poses DIR|orbit
    onlinesplat eval   --ply MAP --sequence DIR

Every RunConfig field can be overridden as ``--section.field VALUE``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from onlinesplat import io
from onlinesplat.pipeline import (
    WEIGHT_GRID,
    ConfigError,
    PipelineError,
    RunConfig,
    _SECTIONS,
    evaluate,
    render_views,
    run,
    sweep_table,
    sweep_uncertainty_weights,
    synthetic_sequence,
)


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    base = RunConfig()
    for section, cls in _SECTIONS.items():
        for fld in dataclasses.fields(cls):
            default = getattr(getattr(base, section), fld.name)
            kind = _parse_bool if isinstance(default, bool) else type(default)
            g.add_argument(f"--{section}.{fld.name}", dest=f"ov:{section}.{fld.name}", type=kind,
                           default=None, metavar=type(default).__name__.upper())


def _global_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--method", help="ablation preset A-E (sets the feature flags)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onlinesplat", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic sequence in TUM layout")
    _global_flags(p)
    _add_config_flags(p)
    p.add_argument("--keyframes-only", action="store_true", help="write depth for keyframes only")

    p = sub.add_parser("run", help="run the online mapper")
    _global_flags(p)
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="uncertainty-weight sweep")
    _global_flags(p)
    _add_config_flags(p)
    p.add_argument("--grid", help="pairs as 'a1:a2,a1:a2,...' (default: seven-point grid)")

    p = sub.add_parser("render", help="render views of a saved map")
    _global_flags(p)
    _add_config_flags(p)
    p.add_argument("--ply", required=True)
    p.add_argument("--poses", default="orbit", help="TUM sequence directory, or 'orbit' for the configured trajectory")
    p.add_argument("--count", type=int, default=8, help="views to render from an orbit")

    p = sub.add_parser("eval", help="score a saved map against a sequence")
    _global_flags(p)
    _add_config_flags(p)
    p.add_argument("--ply", required=True)
    p.add_argument("--sequence", required=True, help="TUM-layout directory")
    p.add_argument("--stride", type=int, default=1)
    return parser


def config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    changes = {}
    if args.method:
        flags = RunConfig.method(args.method).flags
        changes.update({f"flags.{k}": v for k, v in dataclasses.asdict(flags).items()})
    for key, value in vars(args).items():
        if key.startswith("ov:") and value is not None:
            changes[key[3:]] = value
    for key in ("seed", "out", "workers"):
        if getattr(args, key, None) is not None:
            changes[key] = getattr(args, key)
    return cfg.replace(**changes) if changes else cfg


def _parse_grid(text: str):
    pairs = []
    for item in text.split(","):
        a, b = item.split(":")
        pairs.append((float(a), float(b)))
    return pairs


def cmd_synth(args, cfg: RunConfig) -> dict:
    if not cfg.out:
        raise ConfigError("synth needs --out")
    out = Path(cfg.out)
    seq = synthetic_sequence(cfg)
    frames = seq.frames if args.keyframes_only else seq.observed
    io.write_tum(out, frames)
    intr = cfg.intrinsics()
    io.save_report(dataclasses.asdict(intr), out / "intrinsics.json")
    io.save_ply(seq.reference, out / "reference.ply")
    io.save_report({"keyframes": seq.keyframe_ids}, out / "keyframes.json")
    return {"frames": len(frames), "keyframes": len(seq.keyframe_ids), "out": str(out)}


def cmd_run(args, cfg: RunConfig) -> dict:
    report = run(cfg)
    return {"means": report.means, "gaussians": report.gaussian_count, "out": cfg.out or None}


def cmd_sweep(args, cfg: RunConfig) -> dict:
    grid = _parse_grid(args.grid) if args.grid else WEIGHT_GRID
    cells = sweep_uncertainty_weights(cfg, grid, cfg.workers)
    return {"table": sweep_table(cells)}


def _sequence_poses(directory):
    seq = io.load_tum(directory, intrinsics=_intrinsics_for(directory))
    return seq


def _intrinsics_for(directory):
    p = Path(directory) / "intrinsics.json"
    if p.exists():
        from onlinesplat.core import Intrinsics

        return Intrinsics(**json.loads(p.read_text()))
    return None


def cmd_render(args, cfg: RunConfig) -> dict:
    from onlinesplat.frontend_sim import generate_trajectory

    gmap = io.load_ply(args.ply)
    out = Path(cfg.out or ".")
    if args.poses == "orbit":
        poses = generate_trajectory(cfg.trajectory_spec())
        poses = poses[:: max(1, len(poses) // max(args.count, 1))][: args.count]
        intr = cfg.intrinsics()
    else:
        seq = _sequence_poses(args.poses)
        poses = [seq.groundtruth[g][1] for _, _, g in seq.associations]
        intr = seq.intrinsics
    paths = render_views(gmap, poses, intr, out, settings=cfg.render.settings())
    return {"rendered": [str(p) for p in paths]}


def cmd_eval(args, cfg: RunConfig) -> dict:
    gmap = io.load_ply(args.ply)
    seq = _sequence_poses(args.sequence)
    report = evaluate(gmap, seq.frames(), args.stride, settings=cfg.render.settings())
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        io.save_report(report.to_dict(), Path(cfg.out) / "eval.json")
    return {"means": report.means, "gaussians": report.gaussian_count}


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "sweep": cmd_sweep, "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        result = COMMANDS[args.command](args, cfg)
    except Exception as exc:
        err = {"error": str(exc), "type": type(exc).__name__, "command": args.command}
        if isinstance(exc, PipelineError):
            err.update(exc.to_dict())
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, FileNotFoundError, ValueError)) else 1
    print(io.dumps_report(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
