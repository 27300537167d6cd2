"""Experiment runner: simulation cells, deviation sweeps, analytic benchmarks,
scenario generation and trace case studies, all emitting tidy CSV.

Exit codes: 0 on success, 2 when some cells are flagged (unconverged
confidence intervals or an uncertified benchmark), 1 on error.  The worker
pool for independent cells is bounded by the FARMSIM_THREADS environment
variable; results are written in cell order, so reruns with identical
configuration and seeds produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from itertools import product
from pathlib import Path

import numpy as np

from . import engine, fluid, trace
from .model import (
    ScenarioError,
    config_hash,
    generate_scenario,
    load_scenario,
    save_scenario,
    scale,
    with_size_dists,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


def _csv_list(text: str) -> list:
    return [item.strip() for item in text.split(",") if item.strip()]


def _int_list(text: str) -> list:
    return [int(item) for item in _csv_list(text)]


def _workers() -> int:
    env = os.environ.get("FARMSIM_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    print(path)


def _simulate_cell(args):
    """One (policy, discipline, tie, dist, h) cell; top level so it pickles."""
    base, policy, discipline, tie, dist, h, reps, horizon, warmup, seed, max_reps = args
    sc = scale(
        with_size_dists(replace(base, discipline=discipline, tie_break=tie), dist), h
    )
    summary = engine.replications(
        sc, policy, reps, horizon=horizon, warmup=warmup, seed=seed, max_reps=max_reps
    )
    return summary


def _dispatch(cells, fn):
    workers = _workers()
    if workers <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


def cmd_simulate(args) -> int:
    base = load_scenario(args.config)
    chash = config_hash(base)
    cells = [
        (base, pol, disc, args.tie, dist, h, args.reps, args.horizon, args.warmup,
         args.seed, args.max_reps)
        for pol, disc, h, dist in product(
            args.policy, args.discipline, args.h, args.dist
        )
    ]
    summaries = _dispatch(cells, _simulate_cell)

    benchmarks = {}
    for dist in args.dist:
        bench = fluid.opt_energy_efficiency(with_size_dists(base, dist), method="balance")
        benchmarks[dist] = bench

    type_ids = sorted(t.id for t in base.job_types)
    header = (
        ["scenario", "config_hash", "seed", "policy", "discipline", "tie", "dist", "h",
         "row", "time_window", "L", "E", "EE"]
        + [f"blocking_{tid}" for tid in type_ids]
        + ["L_hw", "E_hw", "EE_hw", "ee_opt", "deviation", "certified", "unconverged"]
    )
    rows = []
    partial = False
    for cell, summary in zip(cells, summaries):
        _, pol, disc, tie, dist, h, *_ = cell
        bench = benchmarks[dist]
        prov = [base.name or Path(args.config).stem, chash, args.seed, pol, disc, tie, dist, h]
        for i, rep in enumerate(summary.reps):
            rows.append(
                prov
                + [f"rep{i}", rep.window, rep.throughput, rep.power, rep.energy_efficiency]
                + [rep.blocking[tid] for tid in type_ids]
                + ["", "", "", "", "", "", ""]
            )
        dev = fluid.normalized_deviation(bench.ee_opt, summary.energy_efficiency)
        rows.append(
            prov
            + ["aggregate", summary.window, summary.throughput, summary.power,
               summary.energy_efficiency]
            + [summary.blocking[tid] for tid in type_ids]
            + [summary.throughput_hw, summary.power_hw, summary.energy_efficiency_hw,
               bench.ee_opt, dev, bench.certified and bench.exponential_sizes,
               summary.unconverged]
        )
        if summary.unconverged or not bench.certified:
            partial = True
    _write_rows(Path(args.out) / "simulate.csv", header, rows)
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_sweep_h(args) -> int:
    base = load_scenario(args.config)
    chash = config_hash(base)
    bench = fluid.opt_energy_efficiency(base, method="balance")
    cells = [
        (base, pol, disc, args.tie, dist, h, args.reps, args.horizon, args.warmup,
         args.seed, args.max_reps)
        for pol, disc, dist in product(args.policy, args.discipline, args.dist)
        for h in args.h
    ]
    summaries = _dispatch(cells, _simulate_cell)
    header = [
        "scenario", "config_hash", "seed", "policy", "discipline", "dist", "h",
        "ee_opt", "EE", "EE_hw", "deviation", "log10_deviation", "certified",
        "unconverged",
    ]
    rows = []
    partial = not bench.certified
    for cell, summary in zip(cells, summaries):
        _, pol, disc, _, dist, h, *_ = cell
        dev = fluid.normalized_deviation(bench.ee_opt, summary.energy_efficiency)
        rows.append([
            base.name or Path(args.config).stem, chash, args.seed, pol, disc, dist, h,
            bench.ee_opt, summary.energy_efficiency, summary.energy_efficiency_hw,
            dev, math.log10(dev) if dev > 0 else "", bench.certified,
            summary.unconverged,
        ])
        if summary.unconverged:
            partial = True
    _write_rows(Path(args.out) / "sweep_h.csv", header, rows)
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_benchmark(args) -> int:
    rows = []
    partial = False
    header = [
        "scenario", "config_hash", "h", "ee_opt", "availability", "heavy_traffic",
        "certified", "exponential_sizes", "z_star", "states",
    ]
    for path in args.config:
        base = load_scenario(path)
        sc = scale(base, args.h[0]) if args.h else base
        bench = fluid.opt_energy_efficiency(
            sc, split=args.split, method=args.method, tol=args.tol
        )
        avail = ";".join(
            f"{tid}:{a:.6g}" for tid, a in sorted(bench.availability.items())
        )
        zs = ";".join(repr(float(v)) for v in bench.z_star.values)
        states = ";".join(f"{g}:{n}" for g, n in bench.z_star.ordering.states)
        rows.append([
            base.name or Path(path).stem, config_hash(base), sc.h, bench.ee_opt,
            avail, bench.heavy_traffic, bench.certified, bench.exponential_sizes,
            zs, states,
        ])
        if not bench.certified:
            partial = True
    _write_rows(Path(args.out) / "benchmark.csv", header, rows)
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_generate(args) -> int:
    sc = generate_scenario(
        seed=args.seed, K=args.K, J=args.J, rho=args.rho, mode=args.mode,
        buffer=args.buffer,
    )
    out = Path(args.out)
    if out.is_dir():
        out = out / f"{sc.name}.yaml"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scenario(sc, out)
    print(out)
    return EXIT_OK


def cmd_trace(args) -> int:
    base = load_scenario(args.config)
    chash = config_hash(base)
    type_ids = {t.id for t in base.job_types}
    arrivals = trace.parse_trace(args.trace, valid_type_ids=type_ids)
    if not arrivals:
        raise TraceEmpty(f"trace {args.trace} contains no arrivals")
    stream = trace.replay(arrivals)
    horizon = args.horizon or math.ceil(stream[-1][0] / trace.HOUR) * trace.HOUR

    header = [
        "scenario", "config_hash", "seed", "policy", "discipline", "hour",
        "throughput", "power", "EE", "arrivals", "blocked", "blocking",
    ]
    rows = []
    for pol, disc in product(args.policy, args.discipline):
        sc = replace(base, discipline=disc, tie_break=args.tie)
        m = engine.run(
            sc, pol, horizon=horizon, warmup=0.0, seed=args.seed,
            arrivals=stream, bucket_width=trace.HOUR,
        )
        for hr in m.hourly:
            rows.append([
                base.name or Path(args.config).stem, chash, args.seed, pol, disc,
                hr["bucket"], hr["throughput"], hr["power"],
                hr["energy_efficiency"], hr["arrivals"], hr["blocked"],
                hr["blocking"],
            ])
    _write_rows(Path(args.out) / "trace_study.csv", header, rows)
    return EXIT_OK


class TraceEmpty(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="farmsim",
        description="Energy-efficiency experiments on heterogeneous server farms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="scenario YAML file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="results", help="output directory")

    def sim_options(p):
        p.add_argument("--h", type=_int_list, default=[1], help="scaling parameters, comma separated")
        p.add_argument("--reps", type=int, default=5)
        p.add_argument("--max-reps", type=int, default=None, dest="max_reps")
        p.add_argument("--horizon", type=float, default=400.0)
        p.add_argument("--warmup", type=float, default=None)
        p.add_argument("--policy", type=_csv_list, default=["pas"], help="pas,jsq")
        p.add_argument("--discipline", type=_csv_list, default=["ps"], help="ps,srpt")
        p.add_argument("--tie", choices=["lltb", "sqtb"], default="lltb")
        p.add_argument("--dist", type=_csv_list, default=["exp"],
                       help="exp,pareto-f,pareto-inf,mixed,det")

    p = sub.add_parser("simulate", help="replicated simulation cells")
    common(p)
    sim_options(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-h", help="deviation against the scaling parameter")
    common(p)
    sim_options(p)
    p.set_defaults(func=cmd_sweep_h)

    p = sub.add_parser("benchmark", help="relaxed-optimum benchmark per scenario")
    p.add_argument("--config", nargs="+", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results")
    p.add_argument("--h", type=_int_list, default=None)
    p.add_argument("--split", choices=["proportional", "lowest"], default="proportional")
    p.add_argument("--method", choices=["ode", "balance"], default="ode")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("generate", help="write a random scenario config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--J", type=int, default=1)
    p.add_argument("--rho", type=float, default=0.6)
    p.add_argument("--mode", choices=["single_type", "multi_type"], default="single_type")
    p.add_argument("--buffer", type=int, default=None)
    p.add_argument("--out", default="scenario.yaml")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("trace", help="hourly case study driven by an arrival trace")
    common(p)
    p.add_argument("--trace", required=True, help="trace CSV (timestamp_s,type_id)")
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--policy", type=_csv_list, default=["pas", "jsq"])
    p.add_argument("--discipline", type=_csv_list, default=["ps"])
    p.add_argument("--tie", choices=["lltb", "sqtb"], default="lltb")
    p.set_defaults(func=cmd_trace)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, trace.TraceFormatError, TraceEmpty, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
