"""Command-line entry points producing plot-ready CSV/JSON artifacts.

Subcommands:
  simulate  one (variant, comm-rate) Monte-Carlo run
  sweep     grid of comm rates x variants, one table row per cell
  selftest  fast property checks; --print-config dumps the default config

Every run writes ``report.json``, ``rmse.csv``, ``nees.csv`` and
``meta.json`` into --out.  CSVs are UTF-8 with LF line endings, a header
row, and floats printed with 17 significant digits, so equal (config, seed)
runs are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .config import (config_digest, default_config, load_config,
                     scenario_from_config)
from .metrics import MetricsAccumulator, _record_errors
from .simnet import VARIANTS, run_trial

RMSE_HEADER = "variant,comm_rate,metric,agent,step,value"
NEES_HEADER = "variant,comm_rate,agent,step,value"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _trial_metric_arrays(scenario, variant, trial):
    """Worker payload: per-cell error arrays instead of the full record."""
    rec = run_trial(scenario, variant, trial)
    pos, ori, nees = _record_errors(rec)
    return pos, ori, nees, rec.valid_mask(), rec.diverged_at


def _run_cell(scenario, variant, trials, pool=None):
    """Monte-Carlo run folded into an AggregateReport, in trial order."""
    acc = MetricsAccumulator()
    acc_meta = (variant, 0.0 if variant == "none" else
                (1.0 if variant == "centralized" else scenario.comm_rate))
    if pool is None:
        results = (_trial_metric_arrays(scenario, variant, t) for t in range(trials))
    else:
        results = pool.map(_trial_metric_arrays,
                           [scenario] * trials, [variant] * trials, range(trials),
                           chunksize=max(1, trials // 16))
    for pos, ori, nees, valid, diverged in results:
        acc.add_arrays(pos, ori, nees, valid, diverged, acc_meta[0], acc_meta[1])
    return acc.report()


def _rmse_rows(report) -> list:
    rows = []
    for metric, table in (("pos_m", report.pos_rmse_step),
                          ("ori_deg", report.ori_rmse_step_deg)):
        for agent in range(report.n_agents):
            for step in range(report.steps):
                rows.append(f"{report.variant},{_fmt(report.comm_rate)},{metric},"
                            f"{agent},{step},{_fmt(table[agent, step])}")
    return rows


def _nees_rows(report) -> list:
    rows = []
    for agent in range(report.n_agents):
        for step in range(report.steps):
            rows.append(f"{report.variant},{_fmt(report.comm_rate)},"
                        f"{agent},{step},{_fmt(report.nees_step[agent, step])}")
    return rows


def _table_row(report) -> dict:
    return {
        "variant": report.variant,
        "comm_rate": report.comm_rate,
        "pos_rmse_m": report.pos_rmse_network,
        "ori_rmse_deg": report.ori_rmse_network_deg,
        "mean_nees": report.nees_mean,
        "divergence_rate": report.divergence_rate,
    }


def _write_outputs(out_dir, reports, cfg, seed, extra_meta):
    os.makedirs(out_dir, exist_ok=True)
    written = []
    try:
        rmse_path = os.path.join(out_dir, "rmse.csv")
        with open(rmse_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(RMSE_HEADER + "\n")
            for rep in reports:
                fh.write("\n".join(_rmse_rows(rep)) + "\n")
        written.append(rmse_path)

        nees_path = os.path.join(out_dir, "nees.csv")
        with open(nees_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(NEES_HEADER + "\n")
            for rep in reports:
                fh.write("\n".join(_nees_rows(rep)) + "\n")
        written.append(nees_path)

        report_path = os.path.join(out_dir, "report.json")
        doc = {
            "runs": [rep.to_dict() for rep in reports],
            "table": [_table_row(rep) for rep in reports],
        }
        with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(report_path)

        meta_path = os.path.join(out_dir, "meta.json")
        meta = {
            "version": __version__,
            "seed": seed,
            "config_digest": config_digest(cfg),
            **extra_meta,
        }
        with open(meta_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(meta_path)
    except BaseException:
        for path in written:
            try:
                os.remove(path)
            except OSError:
                pass
        raise
    return written


def _make_pool(threads: int):
    if threads <= 1:
        return None
    from concurrent.futures import ProcessPoolExecutor
    return ProcessPoolExecutor(max_workers=threads)


def _print_table(reports):
    print(f"{'variant':>12} {'rate':>6} {'PRMSE(m)':>12} {'ORMSE(deg)':>12} "
          f"{'meanNEES':>10} {'div':>6}")
    for rep in reports:
        row = _table_row(rep)
        print(f"{row['variant']:>12} {row['comm_rate']:>6.2f} "
              f"{row['pos_rmse_m']:>12.4f} {row['ori_rmse_deg']:>12.3f} "
              f"{row['mean_nees']:>10.3f} {row['divergence_rate']:>6.3f}")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    seed = int(cfg["seed"] if args.seed is None else args.seed)
    rate = float(cfg.get("comm_rate", 0.3) if args.comm_rate is None else args.comm_rate)
    trials = int(cfg.get("trials", 50) if args.trials is None else args.trials)
    scenario = scenario_from_config(cfg, comm_rate=rate, seed=seed)
    pool = _make_pool(args.threads)
    try:
        report = _run_cell(scenario, args.variant, trials, pool)
    finally:
        if pool is not None:
            pool.shutdown()
    _write_outputs(args.out, [report], cfg, seed, {
        "mode": "simulate", "variant": args.variant,
        "comm_rate": report.comm_rate, "trials": trials,
    })
    _print_table([report])
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    seed = int(cfg["seed"] if args.seed is None else args.seed)
    trials = int(cfg.get("trials", 50) if args.trials is None else args.trials)
    rates = [float(r) for r in args.rates.split(",") if r != ""]
    variants = [v.strip().lower() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")

    cells = []
    for variant in variants:
        if variant in ("centralized", "none"):
            cells.append((variant, None))    # rate is irrelevant; run once
        else:
            cells.extend((variant, r) for r in rates)

    reports = []
    pool = _make_pool(args.threads)
    try:
        for variant, rate in cells:
            scenario = scenario_from_config(
                cfg, comm_rate=(rate if rate is not None else 0.0), seed=seed)
            reports.append(_run_cell(scenario, variant, trials, pool))
    finally:
        if pool is not None:
            pool.shutdown()
    _write_outputs(args.out, reports, cfg, seed, {
        "mode": "sweep", "variants": variants, "rates": rates, "trials": trials,
    })
    _print_table(reports)
    return 0


def cmd_selftest(args) -> int:
    if args.print_config:
        print(json.dumps(default_config(), indent=2, sort_keys=True))
        return 0
    from .selftest import run_selftest
    return run_selftest()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="quatfuse",
        description="Distributed 3-D target tracking over a camera network")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one variant at one comm rate")
    sim.add_argument("--config", required=True)
    sim.add_argument("--variant", default="ici", choices=list(VARIANTS))
    sim.add_argument("--comm-rate", type=float, default=None)
    sim.add_argument("--trials", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", required=True)
    sim.add_argument("--threads", type=int, default=1)
    sim.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="grid of comm rates x variants")
    sw.add_argument("--config", required=True)
    sw.add_argument("--rates", default="0,0.2,0.4,0.6,0.8")
    sw.add_argument("--variants", default="ici,ci,centralized")
    sw.add_argument("--trials", type=int, default=None)
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--out", required=True)
    sw.add_argument("--threads", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)

    st = sub.add_parser("selftest", help="fast property checks")
    st.add_argument("--print-config", action="store_true")
    st.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"quatfuse: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
