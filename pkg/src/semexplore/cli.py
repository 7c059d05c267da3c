"""Command line entry point: ``semexplore run`` and ``semexplore sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import (EXIT_CONFIG, EXIT_OK, EXIT_PLANNING, ConfigError, RunConfig, Runner,
                      write_artifacts)
from .planner import PlanningError

log = logging.getLogger("semexplore")


def _add_run_args(p: argparse.ArgumentParser):
    p.add_argument("--scene", help="scene YAML path or bundled scene name (apartment, room, ...)")
    p.add_argument("--config", help="YAML run configuration; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("semantic", "classic"))
    p.add_argument("--budget-sim-seconds", type=float, dest="budget_sim_seconds")
    p.add_argument("--out", help="output directory for CSV, trace, summary and meshes")
    p.add_argument("--frame-skip", type=int, dest="frame_skip")
    p.add_argument("--no-history", action="store_true", help="disable the invalid-depth history")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args, **extra) -> RunConfig:
    over = {k: getattr(args, k) for k in ("scene", "seed", "mode", "budget_sim_seconds", "out",
                                          "frame_skip")}
    over.update(extra)
    if args.no_history:
        over["history_enabled"] = False
    if args.no_figures:
        over["figures"] = False
    if args.config:
        return RunConfig.from_file(args.config, **over)
    return RunConfig.from_dict({k: v for k, v in over.items() if v is not None})


def _run_one(cfg: RunConfig):
    runner = Runner(cfg)
    result = runner.run()
    if cfg.out:
        write_artifacts(result, cfg, runner, cfg.out)
    return result


def cmd_run(args) -> int:
    cfg = _config(args)
    result = _run_one(cfg)
    print(json.dumps(result.summary(), indent=2, default=float))
    return result.exit_code


def cmd_sweep(args) -> int:
    base = Path(args.out or "sweep")
    runs = {}
    for mode in args.modes:
        for seed in args.seeds:
            out = base / f"{mode}_seed{seed}"
            cfg = _config(args, mode=mode, seed=seed, out=str(out))
            res = _run_one(cfg)
            runs.setdefault(mode, []).append(res)
            print(f"{mode} seed={seed} {res.reason} t={res.sim_time:.1f}s rounds={res.rounds}")
    summary = {}
    for mode, results in runs.items():
        found = [r.first_time("objects_found_pct", 100.0) for r in results]
        summary[mode] = {
            "median_sim_time": float(np.median([r.sim_time for r in results])),
            "median_time_all_objects_found": (float(np.median(found))
                                              if all(t is not None for t in found) else None),
            "median_obj_within_dist_pct": float(np.median(
                [r.final["obj_within_dist_pct"] for r in results])),
            "median_explored_fraction": float(np.median(
                [r.final["explored_fraction"] for r in results])),
        }
    base.mkdir(parents=True, exist_ok=True)
    (base / "sweep.json").write_text(json.dumps(summary, indent=2))
    if not args.no_figures:
        from .report import render_comparison
        render_comparison({m: [r.rows for r in rs] for m, rs in runs.items()}, base)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="semexplore",
                                 description="Semantic-aware exploration in simulated scenes.")
    sub = ap.add_subparsers(dest="cmd")
    _add_run_args(sub.add_parser("run", help="one exploration run (default)"))
    sw = sub.add_parser("sweep", help="run several seeds (and modes) and compare")
    _add_run_args(sw)
    sw.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sw.add_argument("--modes", nargs="+", choices=("semantic", "classic"),
                    default=["semantic", "classic"])
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("run", "sweep", "-h", "--help"):
        argv.insert(0, "run")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return cmd_sweep(args) if args.cmd == "sweep" else cmd_run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PlanningError as e:
        print(f"planning failure: {e}", file=sys.stderr)
        return EXIT_PLANNING


if __name__ == "__main__":
    sys.exit(main())
