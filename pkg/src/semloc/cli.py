"""Command line entry point.

Subcommands:

    semloc gen --config world.yaml --out DIR
        Generate a synthetic world and simulated sequence directory.

    semloc run --config run.yaml
        Run the localization pipeline over a sequence and write artifacts.

    semloc eval --estimate EST --reference REF [--interval N]
        Compare two trajectory files and print relative pose error stats.

    semloc init-rate --config run.yaml [--budget N]
        Sample start frames across the sequence and report the fraction
        that reach tracking within the frame budget.

Errors derived from SemlocError map to stable exit codes (see errors.py);
anything else propagates as a traceback.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_run_config, load_world_config
from .errors import SemlocError, SequenceNotFound, exit_code_for
from .pipeline import init_success_rate, run_pipeline
from .report import format_summary
from .rpe import DEFAULT_INTERVAL, compute_rpe, load_trajectory
from .simworld import (
    default_cameras,
    generate_world,
    load_sequence,
    simulate_sequence,
    write_sequence,
)


def _cmd_gen(args) -> int:
    cfg = load_world_config(args.config)
    hdmap, poses = generate_world(cfg.world)
    cameras = default_cameras(front_only=cfg.front_only)
    bundles = simulate_sequence(
        hdmap, poses, cameras, cfg.noise, cfg.seed, dt=cfg.dt, thickness=cfg.thickness
    )
    write_sequence(args.out, hdmap, bundles, cameras)
    print(f"wrote {len(bundles)} frames to {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_run_config(args.config)
    result, paths = run_pipeline(cfg)
    tracked = sum(1 for r in result.records if r.tracked)
    print(f"frames: {len(result.records)}  tracked: {tracked}")
    summary = paths.get("summary")
    if summary is not None:
        print(Path(summary).read_text(), end="")
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return 0


def _cmd_eval(args) -> int:
    estimate = load_trajectory(args.estimate)
    reference = load_trajectory(args.reference)
    report = compute_rpe(estimate, reference, args.interval)
    print(format_summary(report), end="")
    return 0


def _cmd_init_rate(args) -> int:
    cfg = load_run_config(args.config)
    seq_dir = Path(cfg.sequence)
    if not seq_dir.is_dir():
        raise SequenceNotFound(f"sequence directory not found: {seq_dir}")
    hdmap, bundles, cameras = load_sequence(seq_dir)
    rate = init_success_rate(hdmap, bundles, cameras, cfg, args.budget)
    print(f"init success rate (budget {args.budget}): {rate:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semloc", description="map-based semantic localization toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic sequence")
    gen.add_argument("--config", required=True, help="world config YAML")
    gen.add_argument("--out", required=True, help="output sequence directory")
    gen.set_defaults(func=_cmd_gen)

    run = sub.add_parser("run", help="run the localization pipeline")
    run.add_argument("--config", required=True, help="run config YAML")
    run.set_defaults(func=_cmd_run)

    ev = sub.add_parser("eval", help="compare two trajectory files")
    ev.add_argument("--estimate", required=True)
    ev.add_argument("--reference", required=True)
    ev.add_argument("--interval", type=int, default=DEFAULT_INTERVAL)
    ev.set_defaults(func=_cmd_eval)

    ir = sub.add_parser("init-rate", help="initialization success rate")
    ir.add_argument("--config", required=True, help="run config YAML")
    ir.add_argument("--budget", type=int, default=10, help="frames per attempt")
    ir.set_defaults(func=_cmd_init_rate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SemlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
