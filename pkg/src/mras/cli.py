"""Command-line front end.

Subcommands:
  simulate   run the trials of a single spec point and print the records
  sweep      run a full parameter sweep from a spec file and write results
  rip-check  empirical isometry-defect table over a measurement-size ladder
  bounds     measurement-bound comparison table over a parameter grid
  bench      per-iteration runtime table over the spec's sweep (usually M)
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import BoundParams, bound_table, empirical_rip
from .harness import (ExperimentSpec, RESULT_COLUMNS, benchmark_runtime,
                      derive_seed, emit_results, aggregate, run_sweep, run_trial,
                      system_at, solver_at, normalize_algorithm)
from .measurement import operator_from_config


def _load_spec(args) -> ExperimentSpec:
    if args.config is None:
        spec = ExperimentSpec()
    else:
        spec = ExperimentSpec.from_json(Path(args.config).read_text())
    if args.trials is not None:
        spec.trials = args.trials
    if args.seed is not None:
        spec.system.seed = args.seed
    if args.algo is not None:
        spec.algorithms = [normalize_algorithm(a) for a in args.algo.split(",")]
    if args.out is not None:
        spec.out = args.out
    if args.threads is not None:
        spec.threads = args.threads
    return spec


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment spec JSON file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--trials", type=int, help="Monte-Carlo trials per cell")
    p.add_argument("--seed", type=int, help="base RNG seed")
    p.add_argument("--algo", help="comma-separated algorithm list")
    p.add_argument("--threads", type=int, help="trial worker processes")


def cmd_simulate(args) -> int:
    spec = _load_spec(args)
    spec.validate()
    value = spec.sweep_values[0]
    system = system_at(spec, value)
    solver_cfg = solver_at(spec, value)
    records = []
    for algo in spec.algorithms:
        for ti in range(spec.trials):
            seed = derive_seed(spec.system.seed, 0, algo, ti)
            rec = run_trial(system, solver_cfg, spec.baseline, algo, seed, value)
            records.append(rec)
            print(f"{rec.algorithm:8s} seed={rec.seed} aer={rec.aer:.4f} "
                  f"nmse={rec.nmse:.4g} seconds={rec.seconds:.3f}")
    if spec.out:
        emit_results(records, aggregate(records), spec.out)
    return 0


def cmd_sweep(args) -> int:
    spec = _load_spec(args)
    records, aggregates = run_sweep(spec)
    for row in aggregates:
        print(f"{spec.sweep_name}={row['sweep_value']:<8g} {row['algorithm']:8s} "
              f"median_aer={row['median_aer']:.4f} median_nmse={row['median_nmse']:.4g}")
    return 0


def cmd_rip_check(args) -> int:
    spec = _load_spec(args)
    system = spec.system
    system.validate()
    rng = np.random.default_rng(system.seed)
    u = args.u if args.u is not None else system.K * system.p**2 * system.L_max
    r = args.rank if args.rank is not None else system.K * system.L_max
    rows = []
    for bp in args.bp_values or [system.Bp]:
        from dataclasses import replace
        cfg = replace(system, Bp=int(bp))
        deltas = []
        for _ in range(args.redraws):
            op = operator_from_config(cfg, rng)
            deltas.append(empirical_rip(op, u, r, args.rip_trials, rng,
                                        p=system.p, L=system.L_max, normalize=True))
        rows.append({"Bp": int(bp), "measurements": cfg.Mp * int(bp),
                     "median_delta": float(np.median(deltas)),
                     "deltas": deltas})
        print(f"Bp={bp:<6d} MpBp={cfg.Mp * int(bp):<8d} median delta={rows[-1]['median_delta']:.4f}")
    if spec.out:
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "rip_check.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Bp", "measurements", "median_delta"])
            for row in rows:
                w.writerow([row["Bp"], row["measurements"], row["median_delta"]])
    return 0


def cmd_bounds(args) -> int:
    spec = _load_spec(args)
    grid = []
    for p in args.p_values:
        for K in args.k_values:
            grid.append(BoundParams(N=args.N, D=args.D, M1=args.M1, p_max=p, p_min=p,
                                    L_max=args.L, L_min=args.L, K=K, r=args.rank_r,
                                    t=args.t))
    rows = bound_table(grid)
    for row in rows:
        print(f"p={row['p']} K={row['K']} theorem1={row['theorem1']:.1f} "
              f"traditional={row['traditional']:.1f} smaller={row['theorem1_smaller']} "
              f"conditions={row['conditions_hold']}")
    if spec.out:
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bounds.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
    return 0


def cmd_bench(args) -> int:
    spec = _load_spec(args)
    rows = benchmark_runtime(spec, iters=args.iters, repeats=args.repeats)
    for row in rows:
        print(f"{spec.sweep_name}={row['sweep_value']:<8g} {row['algorithm']:8s} "
              f"median_iter_seconds={row['median_iter_seconds']:.5f}")
    if spec.out:
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mras",
                                     description="multi-rank aware recovery simulations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one spec point")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a parameter sweep")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rip-check", help="empirical isometry defect")
    _add_common(p)
    p.add_argument("--u", type=int, help="block-sparsity budget (default K p^2 L)")
    p.add_argument("--rank", type=int, help="rank of the test matrices (default K L)")
    p.add_argument("--rip-trials", type=int, default=200)
    p.add_argument("--redraws", type=int, default=5, help="operator redraws per point")
    p.add_argument("--bp-values", type=int, nargs="+", help="pilot lengths to scan")
    p.set_defaults(func=cmd_rip_check)

    p = sub.add_parser("bounds", help="measurement bound tables")
    _add_common(p)
    p.add_argument("--N", type=int, default=200)
    p.add_argument("--D", type=int, default=64)
    p.add_argument("--M1", type=int, default=64)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--rank-r", type=int, default=4)
    p.add_argument("--t", type=float, default=2.0)
    p.add_argument("--p-values", type=int, nargs="+", default=[2, 3, 4, 5, 6, 7, 8])
    p.add_argument("--k-values", type=int, nargs="+", default=[2, 4, 6, 8, 10])
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("bench", help="runtime benchmark over the sweep")
    _add_common(p)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
