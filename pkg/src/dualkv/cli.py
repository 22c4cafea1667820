"""Command line driver.

Subcommands:
  run      one workload under one policy; writes samples CSV, report
           JSON, and timeseries/utilization figures into --out-dir.
  compare  several runs side by side (repeat --policy / --workload /
           --seed); writes a comparison CSV and bar chart.
  cdf      stall-interval bus-utilization CDF from an existing samples
           CSV; writes a CDF CSV and step plot.

Exit codes: 0 ok, 1 usage or input error, 2 simulation invariant
violation.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict

from . import bench, figures
from .config import (POLICIES, ROLLBACK_MODES, SimConfig, ConfigError, load_config)


def _base_config(args: argparse.Namespace) -> SimConfig:
    cfg = load_config(args.config) if args.config else SimConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "policy", None):
        overrides["policy"] = args.policy
    if getattr(args, "rollback_mode", None):
        overrides["rollback_mode"] = args.rollback_mode
    return cfg.copy(**overrides) if overrides else cfg


def _tag(workload: str, cfg: SimConfig) -> str:
    return f"{workload}-{cfg.policy}-{cfg.rollback_mode}-s{cfg.seed}"


def _run_one(workload: str, cfg: SimConfig, out_dir: str) -> bench.RunResult:
    result = bench.run_workload(cfg, workload)
    paths = bench.out_paths(out_dir, _tag(workload, cfg))
    bench.write_samples_csv(result.samples, paths["samples"])
    bench.write_report_json(result.report, paths["report"])
    rows = [asdict(m) for m in result.samples]
    figures.render_timeseries(rows, result.report, paths["timeseries"])
    figures.render_utilization(rows, paths["utilization"])
    r = result.report
    print(f"{_tag(workload, cfg)}: {r['puts_acked']} puts, {r['gets_acked']} gets, "
          f"{r['ranges_acked']} ranges | zero-write intervals {r['zero_write_intervals']} | "
          f"blocked {r['blocked_puts']} redirected {r['redirected_puts']} | "
          f"rollbacks {r['rollback_sessions']}")
    print(f"  wrote {paths['samples']}")
    return result


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _base_config(args)
    _run_one(args.workload.upper(), cfg, args.out_dir)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    policies = args.policy or list(POLICIES)
    workloads = args.workload or ["A"]
    seeds = args.seed or [SimConfig().seed]
    cfg0 = load_config(args.config) if args.config else SimConfig()
    results = []
    for workload in workloads:
        for policy in policies:
            for seed in seeds:
                cfg = cfg0.copy(policy=policy, seed=seed,
                                **({"rollback_mode": args.rollback_mode}
                                   if args.rollback_mode else {}))
                results.append(_run_one(workload.upper(), cfg, args.out_dir))
    rows = bench.compare_runs(results)
    csv_path = f"{args.out_dir}/compare.csv"
    bench.write_compare_csv(rows, csv_path)
    figures.render_compare(rows, f"{args.out_dir}/compare.png")
    print(f"wrote {csv_path}")
    return 0


def cmd_cdf(args: argparse.Namespace) -> int:
    samples = bench.read_samples_csv(args.samples_csv)
    try:
        rows = bench.utilization_cdf_rows(samples)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    paths = bench.out_paths(args.out_dir, "cdf")
    csv_path = f"{args.out_dir}/cdf.csv"
    bench.write_cdf_csv(rows, csv_path)
    figures.render_cdf(rows, f"{args.out_dir}/cdf.png")
    mass_low = sum(1 for u, _ in rows if u < 0.05) / len(rows)
    print(f"{len(rows)} stall intervals, {100 * mass_low:.1f}% below 0.05 utilization")
    print(f"wrote {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualkv", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one workload")
    run.add_argument("--workload", default="A", choices=list(bench.WORKLOADS) +
                     [w.lower() for w in bench.WORKLOADS])
    run.add_argument("--policy", choices=POLICIES)
    run.add_argument("--rollback-mode", dest="rollback_mode", choices=ROLLBACK_MODES)
    run.add_argument("--seed", type=int)
    run.add_argument("--config", help="key=value config file")
    run.add_argument("--out-dir", dest="out_dir", default="out")
    run.set_defaults(fn=cmd_run)

    comp = sub.add_parser("compare", help="run several configurations side by side")
    comp.add_argument("--workload", action="append",
                      choices=list(bench.WORKLOADS) + [w.lower() for w in bench.WORKLOADS])
    comp.add_argument("--policy", action="append", choices=POLICIES)
    comp.add_argument("--rollback-mode", dest="rollback_mode", choices=ROLLBACK_MODES)
    comp.add_argument("--seed", action="append", type=int)
    comp.add_argument("--config")
    comp.add_argument("--out-dir", dest="out_dir", default="out")
    comp.set_defaults(fn=cmd_compare)

    cdf = sub.add_parser("cdf", help="stall-interval utilization CDF from a samples CSV")
    cdf.add_argument("samples_csv")
    cdf.add_argument("--out-dir", dest="out_dir", default="out")
    cdf.set_defaults(fn=cmd_cdf)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
