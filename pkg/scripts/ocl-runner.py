#!/usr/bin/env python3
"""
ocl-runner.py — experiment runner for the object-centric toolkit

Usage:
    # generate a dataset
    python scripts/ocl-runner.py gen-data --config smoke --out data/smoke

    # one configuration, one or more seeds
    python scripts/ocl-runner.py run --config slot_ctrimg --seed 0
    python scripts/ocl-runner.py run --config slot_ctrimg --seeds 0..2 --set trainer.epochs=4

    # ablation grids
    python scripts/ocl-runner.py grid --config base \
        --attention slot,cross --loss ctrall,ctrimg,cossim --seeds 0..3
    python scripts/ocl-runner.py grid --config slot_ctrimg --attention slot --loss ctrimg \
        --crop-min 0.1,0.3,0.5 --crop-max 0.5,0.8,1.0

    # aggregate completed runs
    python scripts/ocl-runner.py report runs/ --out runs/summary

    # re-evaluate a trained run
    python scripts/ocl-runner.py eval-only runs/slot_ctrimg-0123456789ab/seed-0

Exit codes: 0 ok, 1 config/usage error, 2 runtime failure.
Environment: OCL_RUN_ROOT sets the run root (default ./runs).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

# scripts/ on the path so the sibling modules import when run directly
sys.path.insert(0, str(Path(__file__).resolve().parent))
from experiment import eval_only, generate_dataset, grid_configs, resolve_config, run_experiment, run_grid
from ocl_utils import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUNTIME_FAILURE,
    ConfigError,
    OclError,
    error,
    get_run_root,
    info,
    parse_csv,
    parse_int_range,
)
from reporting import write_report


def _seeds(args: argparse.Namespace, default: list[int]) -> list[int]:
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    if getattr(args, "seeds", None):
        return parse_int_range(args.seeds)
    return default


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, args.set)
    dataset = generate_dataset(cfg, Path(args.out))
    sizes = ", ".join(f"{name}={len(idx)}" for name, idx in dataset.splits.items())
    print(f"[PASS] dataset written: {args.out} ({sizes})")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, args.set)
    for seed in _seeds(args, cfg.seeds):
        run_dir = run_experiment(cfg, seed, force=args.force)
        print(f"[PASS] {run_dir}")
    return EXIT_OK


def cmd_grid(args: argparse.Namespace) -> int:
    base = resolve_config(args.config, args.set)
    configs = grid_configs(
        base,
        parse_csv(args.attention),
        parse_csv(args.loss),
        [float(v) for v in parse_csv(args.crop_min)] if args.crop_min else None,
        [float(v) for v in parse_csv(args.crop_max)] if args.crop_max else None,
    )
    seeds = _seeds(args, base.seeds)
    info(f"grid: {len(configs)} config(s) × {len(seeds)} seed(s)")
    done, failed = run_grid(configs, seeds, force=args.force)
    print(f"[{'FAIL' if failed else 'PASS'}] {len(done)} run(s) completed, {len(failed)} failed")
    for name in failed:
        print(f"  - {name}")
    return EXIT_RUNTIME_FAILURE if failed else EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    paths = [Path(p) for p in args.run_dirs] or [get_run_root()]
    out = Path(args.out) if args.out else paths[0] / "summary"
    summary = write_report(paths, out)
    print(f"[PASS] {summary['num_runs']} run(s) aggregated → {out}")
    return EXIT_OK


def cmd_eval_only(args: argparse.Namespace) -> int:
    report = eval_only(Path(args.run_dir))
    print(f"[PASS] iou={report['iou']} ap_object={report['ap_object']} ap_global={report['ap_global']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Object-centric contrastive experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="preset name under templates/experiments/ or a YAML path")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="config override (repeatable)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    config_args(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("run", help="train and evaluate one configuration")
    config_args(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", default=None, help="e.g. 0..3 or 0,2,5")
    p.add_argument("--force", action="store_true", help="re-run completed runs")

    p = sub.add_parser("grid", help="run an ablation grid")
    config_args(p)
    p.add_argument("--attention", default="slot,cross", help="comma list of slot, cross, none")
    p.add_argument("--loss", default="ctrall,ctrimg,cossim", help="comma list of ctrall, ctrimg, cossim, none")
    p.add_argument("--seeds", default=None)
    p.add_argument("--crop-min", default=None, help="comma list of minimum crop scales")
    p.add_argument("--crop-max", default=None, help="comma list of maximum crop scales")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("report", help="aggregate completed runs")
    p.add_argument("run_dirs", nargs="*", help="run directories or parents (default: run root)")
    p.add_argument("--out", default=None, help="output directory (default: <first dir>/summary)")

    p = sub.add_parser("eval-only", help="re-evaluate a trained run")
    p.add_argument("run_dir")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "run": cmd_run,
    "grid": cmd_grid,
    "report": cmd_report,
    "eval-only": cmd_eval_only,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG_ERROR
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as e:
        error(str(e))
        return EXIT_CONFIG_ERROR
    except (OclError, RuntimeError) as e:
        error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME_FAILURE


if __name__ == "__main__":
    sys.exit(main())
