"""Command-line entry point: ``hatsim {otse,mrse,grid,sweep} [options]``.

Every subcommand writes ``report.json`` and ``comparison.csv`` into ``--out``;
single runs also write ``history_<target>.csv`` per expanded target, grid and
sweep runs write them into one sub-directory per cell.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .config import PRESETS, ExperimentConfig, load, parse_strategy, validate
from .errors import ConfigError, InvalidInputError
from .experiment import (
    report_row,
    run_baseline_grid,
    run_mrse,
    run_otse,
    run_sweep,
    write_comparison,
)


def _int_list(text: str) -> list:
    """``5`` means seeds 0..4; ``1,3,7`` is an explicit list."""
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) == 1:
        return list(range(int(parts[0])))
    return [int(p) for p in parts]


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="sectioned key = value config file")
    common.add_argument("--seed", type=int, help="run seed (overrides [run] seed)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--strategy", metavar="NAME",
                        help=f"preset ({', '.join(PRESETS)}) or selection/fusion/injection")
    common.add_argument("--eta", type=float, help="coarse selection keep ratio")
    common.add_argument("--np", dest="n_p", type=int, help="number of sources to fuse")
    common.add_argument("--gamma", type=float, help="labeled fraction of the target training split")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for grid cells")
    common.add_argument("--save-models", action="store_true", help="write final target models (binary)")
    common.add_argument("--dump-weights", action="store_true", help="write per-sample fusion weights")

    p = argparse.ArgumentParser(prog="hatsim", description="Simulate model curation for expanding edge fleets.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("otse", parents=[common], help="one-time expansion of a single target")
    sub.add_parser("mrse", parents=[common], help="multi-round expansion over a group layout")

    g = sub.add_parser("grid", parents=[common], help="strategies x seeds comparison")
    g.add_argument("--strategies", default="hat,supervised,equal_distill",
                   help="comma-separated strategy names")
    g.add_argument("--seeds", default="5", help="count (N -> 0..N-1) or comma list")
    g.add_argument("--mode", choices=("otse", "mrse"), default="otse")

    s = sub.add_parser("sweep", parents=[common], help="vary one parameter")
    s.add_argument("--param", required=True, help="eta, np, b, m, gamma, omega or a dotted config key")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", default="5", help="count (N -> 0..N-1) or comma list")
    return p


def build_config(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.eta is not None:
        overrides["selection.eta"] = args.eta
    if args.n_p is not None:
        overrides["selection.n_p"] = args.n_p
    if args.gamma is not None:
        overrides["target.gamma"] = args.gamma
    if args.strategy is not None:
        overrides["strategy"] = parse_strategy(args.strategy)
    cfg = cfg.replace(**overrides)
    validate(cfg)
    return cfg


def _cell_dir(out, rep, row, extra) -> str:
    lead = "".join(f"{k}{row[k]}_" for k in extra)
    return os.path.join(out, f"{lead}{rep.strategy.replace('/', '-')}_seed{rep.seed}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = build_config(args)
        os.makedirs(args.out, exist_ok=True)
        if args.command in ("otse", "mrse"):
            run = run_otse if args.command == "otse" else run_mrse
            rep = run(cfg)
            rep.write(args.out, models=args.save_models, weights=args.dump_weights)
            rows = [report_row(rep)]
            print(f"{rep.strategy} seed={rep.seed} accuracy={rep.accuracy:.4f} "
                  f"traffic={rep.traffic['total_bytes']} inferences={rep.inference_count}")
            write_comparison(rows, os.path.join(args.out, "comparison.csv"))
            return 0

        seeds = _int_list(args.seeds)
        if args.command == "grid":
            names = [n for n in args.strategies.split(",") if n]
            reports = run_baseline_grid(cfg, names, seeds, mode=args.mode, jobs=args.jobs)
            rows = [report_row(r) for r in reports]
            extra = ()
        else:
            values = [v for v in args.values.split(",") if v]
            reports = []
            rows = run_sweep(cfg, args.param, values, seeds, jobs=args.jobs, collect=reports)
            extra = (args.param,)
        for rep, row in zip(reports, rows):
            rep.write(_cell_dir(args.out, rep, row, extra), models=args.save_models, weights=args.dump_weights)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            json.dump({"command": args.command, "rows": rows, "cells": [r.to_dict() for r in reports]},
                      fh, sort_keys=True, indent=2)
        write_comparison(rows, os.path.join(args.out, "comparison.csv"), extra)
        width = max(len(str(r["strategy"])) for r in rows)
        for r in rows:
            lead = "".join(f"{k}={r[k]} " for k in extra)
            pacc = "-" if r["p_acc"] is None else f"{r['p_acc']:.4f}"
            print(f"{lead}{r['strategy']:<{width}} seed={r['seed']} accuracy={r['accuracy']:.4f} p_acc={pacc}")
        return 0
    except (ConfigError, InvalidInputError, OSError) as exc:
        print(f"hatsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
