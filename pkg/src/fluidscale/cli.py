"""Command-line entry point: ``fluidscale --experiment NAME [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import POLICIES, SCENARIOS, ConfigError, ExperimentConfig, run_experiment

EXIT_INFEASIBLE = 3
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fluidscale",
        description="Compare fluid replica schedules against a reactive autoscaler by simulation.",
    )
    p.add_argument("--experiment", choices=SCENARIOS, help="scenario to run (required unless --config sets it)")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--reps", type=int, help="replications per sweep point and policy")
    p.add_argument("--seed", type=int, help="base seed; replication i uses seed + i")
    p.add_argument("--steps", type=int, help="time steps of the discretized fluid program")
    p.add_argument("--horizon", type=float, help="override the scenario horizon")
    p.add_argument("--out", help="output directory for report.csv and diagrams")
    p.add_argument("--policy", choices=POLICIES, help="which policies to simulate")
    p.add_argument("--sweep", type=float, nargs="+", help="override the sweep values")
    p.add_argument("--spec", help="network spec JSON for the custom scenario")
    p.add_argument("--profile", choices=("paper", "ci"), help="default sweeps and replications")
    p.add_argument("--workers", type=int, help="parallel replication workers")
    p.add_argument("--strict-rr", action="store_true", default=None,
                   help="fail a request when its round-robin replica is full instead of scanning")
    p.add_argument("--dump-logs", action="store_true", default=None, help="write every request log as CSV")
    p.add_argument("--diagrams", action=argparse.BooleanOptionalAction, default=None,
                   help="write cumulative and replica-count CSVs for the first replication")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "scenario": args.experiment,
        "replications": args.reps,
        "seed": args.seed,
        "n_steps": args.steps,
        "horizon": args.horizon,
        "out": args.out,
        "policy": args.policy,
        "spec": args.spec,
        "profile": args.profile,
        "workers": args.workers,
        "strict_rr": args.strict_rr,
        "dump_logs": args.dump_logs,
        "diagrams": args.diagrams,
    }
    if args.sweep is not None:
        overrides["sweep"] = [int(v) if v.is_integer() and args.experiment in ("network-size", "initial-replicas") else v
                              for v in args.sweep]
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    if args.experiment is None:
        raise ConfigError("--experiment is required without --config")
    return ExperimentConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _fmt(v, width=12):
    if v is None:
        return "-".rjust(width)
    if isinstance(v, float):
        return f"{v:{width}.4g}"
    return str(v).rjust(width)


def print_report(report, stream=None) -> None:
    stream = stream or sys.stdout
    cols = ("point", "policy", "status", "horizon", "fluid_objective", "holding_cost_mean",
            "avg_response_time_mean", "failures_mean", "timeouts_mean")
    heads = ("point", "policy", "status", "horizon", "fluid obj", "cost", "avg time", "failed", "timeouts")
    print("".join(h.rjust(12) for h in heads), file=stream)
    for r in report.rows:
        print("".join(_fmt(getattr(r, c)) for c in cols), file=stream)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"fluidscale: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = run_experiment(cfg)
    print_report(report)
    if report.all_infeasible:
        print("fluidscale: the fluid program is infeasible at every sweep point", file=sys.stderr)
        for point, why in report.fluid_failures.items():
            print(f"  {point}: {why}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return 0


if __name__ == "__main__":
    sys.exit(main())
