"""Experiment orchestration: Monte-Carlo trials, parameter sweeps, runtime
benchmarks, and result persistence (CSV + JSON + plot-ready series)."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import BaselineConfig, fista_solve, omp_solve
from .channel import SystemConfig, build_dictionaries, generate_scene
from .measurement import (add_noise, calibrate_sigma2, forward, operator_from_config)
from .metrics import aer, default_v1, detect_activity, estimate_channels, nmse
from .solver import SolverAbort, SolverConfig, solve

logger = logging.getLogger(__name__)

ALGORITHMS = ("rg-mras", "rc-mras", "fista", "omp")

RESULT_COLUMNS = ("sweep_value", "algorithm", "seed", "aer", "nmse",
                  "seconds", "iterations", "loss")

RESULTS_JSON_SCHEMA = {
    "type": "object",
    "required": ["records"],
    "properties": {
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": list(RESULT_COLUMNS),
                "properties": {
                    "sweep_value": {"type": "number"},
                    "algorithm": {"type": "string"},
                    "seed": {"type": "integer"},
                    "aer": {"type": ["number", "null"]},
                    "nmse": {"type": ["number", "string", "null"]},
                    "seconds": {"type": "number"},
                    "iterations": {"type": "integer"},
                    "loss": {"type": ["number", "null"]},
                },
            },
        }
    },
}


@dataclass
class ResultRecord:
    sweep_value: float
    algorithm: str
    seed: int
    aer: float
    nmse: float
    seconds: float
    iterations: int
    loss: float
    failed: bool = False


@dataclass
class ExperimentSpec:
    system: SystemConfig = field(default_factory=SystemConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    sweep_name: str = "p"
    sweep_values: list = field(default_factory=lambda: [4])
    trials: int = 10
    algorithms: list[str] = field(default_factory=lambda: list(ALGORITHMS))
    out: str | None = None
    threads: int = 1

    def validate(self) -> None:
        for algo in self.algorithms:
            if normalize_algorithm(algo) not in ALGORITHMS:
                raise ValueError(f"unknown algorithm {algo!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for value in self.sweep_values:
            system_at(self, value).validate()

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["system"]["d_range"] = list(self.system.d_range)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        d = json.loads(text)
        system = SystemConfig.from_json(json.dumps(d.pop("system", {})))
        solver = SolverConfig(**d.pop("solver", {}))
        baseline = BaselineConfig(**d.pop("baseline", {}))
        return cls(system=system, solver=solver, baseline=baseline, **d)


def normalize_algorithm(name: str) -> str:
    return name.strip().lower().replace("_", "-")


def derive_seed(base_seed: int, sweep_index: int, algorithm: str, trial_index: int) -> int:
    """Stable 63-bit trial seed; distinct cells never share RNG streams."""
    key = f"{base_seed}:{sweep_index}:{normalize_algorithm(algorithm)}:{trial_index}"
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def system_at(spec: ExperimentSpec, value) -> SystemConfig:
    """The system config at one sweep point.

    Sweepable names: p, Bp, K, activity (K/N with K rounded), N (keeps the
    base activity ratio), snr_db, L_max, M (couples Mp = M1 = M and the delay
    depth to M, the runtime-benchmark convention), L_hat (solver-side only).
    """
    cfg = spec.system
    name = spec.sweep_name
    if name == "p":
        return replace(cfg, p=int(value))
    if name == "Bp":
        return replace(cfg, Bp=int(value))
    if name == "K":
        return replace(cfg, K=int(value))
    if name == "activity":
        return replace(cfg, K=int(round(value * cfg.N)))
    if name == "N":
        ratio = cfg.K / cfg.N
        return replace(cfg, N=int(value), K=int(round(ratio * int(value))))
    if name == "snr_db":
        return replace(cfg, snr_db=float(value), sigma2=None)
    if name == "L_max":
        return replace(cfg, L_max=int(value))
    if name == "M":
        M = int(value)
        return replace(cfg, M=M, Mp=M, M1=M, gamma=M / cfg.B)
    if name == "L_hat":
        return cfg
    raise ValueError(f"unknown sweep parameter {name!r}")


def solver_at(spec: ExperimentSpec, value) -> SolverConfig:
    if spec.sweep_name == "L_hat":
        return replace(spec.solver, rank=int(value))
    return spec.solver


def run_trial(system: SystemConfig, solver_cfg: SolverConfig,
              baseline_cfg: BaselineConfig, algorithm: str, seed: int,
              sweep_value: float = 0.0) -> ResultRecord:
    """One Monte-Carlo trial: scene, operator, noise, recovery, scoring."""
    algorithm = normalize_algorithm(algorithm)
    system.validate()
    ss = np.random.SeedSequence(seed)
    rng_scene, rng_op, rng_noise = [np.random.default_rng(s) for s in ss.spawn(3)]

    scene = generate_scene(system, rng_scene)
    op = operator_from_config(system, rng_op)
    Y0 = forward(op, scene.gated_states)
    if system.sigma2 is not None:
        sigma2 = system.sigma2
    elif system.snr_db is not None and scene.support.size > 0:
        sigma2 = calibrate_sigma2(op, scene.states, scene.support, system.snr_db)
    else:
        sigma2 = 0.0
    Y = add_noise(Y0, sigma2, rng_noise)

    t0 = time.perf_counter()
    failed = False
    iterations = 0
    final_loss = float("nan")
    try:
        if algorithm in ("rg-mras", "rc-mras"):
            cfg = replace(solver_cfg, variant="rg" if algorithm == "rg-mras" else "rc")
            X_hat, trace = solve(op, Y, system, cfg)
            iterations = trace.iterations
            final_loss = trace.loss[-1] if trace.loss else float("nan")
        elif algorithm == "fista":
            X_hat, info = fista_solve(op, Y, baseline_cfg)
            iterations = info["iterations"]
            final_loss = info["objective"][-1]
        elif algorithm == "omp":
            cfg = baseline_cfg
            if cfg.sparsity_budget is None:
                cfg = replace(cfg, sparsity_budget=max(system.K, 1))
            X_hat, info = omp_solve(op, Y, cfg)
            iterations = info["iterations"]
            final_loss = 0.5 * (info["residual"][-1] * np.linalg.norm(Y)) ** 2
        else:
            raise ValueError(f"unknown algorithm {algorithm!r}")
    except SolverAbort as exc:
        logger.warning("trial seed=%d %s aborted: %s", seed, algorithm, exc)
        failed = True
        X_hat = np.zeros_like(scene.states)
    seconds = time.perf_counter() - t0

    v1 = default_v1(scene)
    detection = detect_activity(X_hat, v1)
    score_aer = aer(scene.support, detection.support, system.N)

    A_theta, A_tau = op.A_theta, op.A_tau
    H_true = estimate_channels(scene.gated_states, A_theta, A_tau, scene.support)
    detected = set(map(int, detection.support))
    est_idx = [k for k in map(int, scene.support) if k in detected]
    H_est = estimate_channels(X_hat, A_theta, A_tau, est_idx)
    score_nmse = nmse(H_true, H_est) if scene.support.size else 0.0

    return ResultRecord(sweep_value=float(sweep_value), algorithm=algorithm,
                        seed=seed, aer=float("nan") if failed else score_aer,
                        nmse=float("nan") if failed else score_nmse,
                        seconds=seconds, iterations=iterations, loss=final_loss,
                        failed=failed)


def _trial_args(spec: ExperimentSpec):
    for si, value in enumerate(spec.sweep_values):
        system = system_at(spec, value)
        solver_cfg = solver_at(spec, value)
        for algo in spec.algorithms:
            for ti in range(spec.trials):
                seed = derive_seed(spec.system.seed, si, algo, ti)
                yield (system, solver_cfg, spec.baseline, algo, seed, value)


def run_sweep(spec: ExperimentSpec) -> tuple[list[ResultRecord], list[dict]]:
    """Full factorial sweep x algorithm x trial. Partial failures are kept as
    flagged records and excluded from the aggregates. Writes outputs when
    spec.out is set."""
    spec.validate()
    args = list(_trial_args(spec))
    if spec.threads > 1:
        with ProcessPoolExecutor(max_workers=spec.threads) as pool:
            records = list(pool.map(_run_trial_star, args))
    else:
        records = [_run_trial_star(a) for a in args]
    records.sort(key=lambda r: (r.sweep_value, r.algorithm, r.seed))
    aggregates = aggregate(records)
    if spec.out is not None:
        emit_results(records, aggregates, spec.out)
    return records, aggregates


def _run_trial_star(args):
    return run_trial(*args)


def aggregate(records: list[ResultRecord]) -> list[dict]:
    """Mean and median per (sweep value, algorithm) cell; failures counted."""
    cells: dict[tuple, list[ResultRecord]] = {}
    for r in records:
        cells.setdefault((r.sweep_value, r.algorithm), []).append(r)
    rows = []
    for (value, algo), recs in sorted(cells.items()):
        ok = [r for r in recs if not r.failed]
        row = {"sweep_value": value, "algorithm": algo,
               "trials": len(recs), "failed": len(recs) - len(ok)}
        for name in ("aer", "nmse", "seconds"):
            vals = np.array([getattr(r, name) for r in ok], dtype=float)
            row[f"mean_{name}"] = float(np.mean(vals)) if vals.size else float("nan")
            row[f"median_{name}"] = float(np.median(vals)) if vals.size else float("nan")
        rows.append(row)
    return rows


def _json_safe(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None if np.isnan(x) else "inf"
    return x


def emit_results(records: list[ResultRecord], aggregates: list[dict], out_dir) -> dict:
    """Write raw CSV/JSON, the aggregate table, and per-metric plot series
    (one column per algorithm). Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    raw_csv = out / "raw.csv"
    with open(raw_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in records:
            writer.writerow([getattr(r, c) for c in RESULT_COLUMNS])
    paths["raw_csv"] = raw_csv

    raw_json = out / "raw.json"
    payload = {"records": [
        {c: _json_safe(getattr(r, c)) for c in RESULT_COLUMNS} for r in records
    ]}
    raw_json.write_text(json.dumps(payload, indent=1))
    paths["raw_json"] = raw_json

    agg_csv = out / "aggregate.csv"
    if aggregates:
        with open(agg_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(aggregates[0].keys()))
            writer.writeheader()
            writer.writerows(aggregates)
        paths["aggregate_csv"] = agg_csv

    algos = sorted({a["algorithm"] for a in aggregates})
    values = sorted({a["sweep_value"] for a in aggregates})
    for metric in ("median_nmse", "median_aer", "mean_nmse", "mean_aer"):
        plot_csv = out / f"plot_{metric}.csv"
        table = {(a["sweep_value"], a["algorithm"]): a[metric] for a in aggregates}
        with open(plot_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sweep_value"] + algos)
            for v in values:
                writer.writerow([v] + [table.get((v, a), "") for a in algos])
        paths[metric] = plot_csv
    return paths


def load_records_csv(path) -> list[ResultRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(ResultRecord(
                sweep_value=float(row["sweep_value"]), algorithm=row["algorithm"],
                seed=int(row["seed"]), aer=float(row["aer"]), nmse=float(row["nmse"]),
                seconds=float(row["seconds"]), iterations=int(row["iterations"]),
                loss=float(row["loss"])))
    return records


def benchmark_runtime(spec: ExperimentSpec, iters: int = 30,
                      repeats: int = 3) -> list[dict]:
    """Median per-iteration wall time per algorithm per sweep point.

    Runs the solver inner loop on one drawn instance per point (per repeat)
    and reports the median over iterations and repeats. For OMP a round of
    selection plus refit counts as one iteration.
    """
    from dataclasses import replace as _replace
    rows = []
    for si, value in enumerate(spec.sweep_values):
        system = system_at(spec, value)
        system.validate()
        for algo in spec.algorithms:
            algo = normalize_algorithm(algo)
            times = []
            for rep in range(repeats):
                seed = derive_seed(spec.system.seed, si, algo, rep)
                ss = np.random.SeedSequence(seed)
                rng_scene, rng_op = [np.random.default_rng(s) for s in ss.spawn(2)]
                scene = generate_scene(system, rng_scene)
                op = operator_from_config(system, rng_op)
                Y = forward(op, scene.gated_states)
                if algo in ("rg-mras", "rc-mras"):
                    cfg = _replace(spec.solver, variant="rg" if algo == "rg-mras" else "rc",
                                   max_iter=iters, tol=0.0)
                    _, trace = solve(op, Y, system, cfg)
                    times.extend(trace.seconds[1:])  # first iteration pays warmup
                elif algo == "fista":
                    cfg = _replace(spec.baseline, max_iter=iters, tol=0.0)
                    t0 = time.perf_counter()
                    _, info = fista_solve(op, Y, cfg)
                    times.append((time.perf_counter() - t0) / max(info["iterations"], 1))
                elif algo == "omp":
                    cfg = _replace(spec.baseline, sparsity_budget=max(system.K, 1))
                    t0 = time.perf_counter()
                    _, info = omp_solve(op, Y, cfg)
                    times.append((time.perf_counter() - t0) / max(info["iterations"], 1))
            rows.append({"sweep_value": value, "algorithm": algo,
                         "median_iter_seconds": float(np.median(times)),
                         "iterations_timed": len(times)})
    return rows
