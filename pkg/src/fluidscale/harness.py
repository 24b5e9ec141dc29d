"""Experiment driver: scenario sweeps, fluid solves, replicated simulations."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import sim
from .fluid import FluidProgramError, InfeasibleProgram, max_feasible_horizon, solve_spec
from .model import NetworkSpec, build_crisscross, build_heterogeneous, build_unique_allocation
from .planner import PlanningError, ReplicaPlan, plan_ceiling

log = logging.getLogger(__name__)

SCENARIOS = ("crisscross", "network-size", "timeout", "initial-replicas", "heterogeneity", "custom")
POLICIES = ("both", "auto", "fluid")
KPIS = ("holding_cost", "avg_response_time", "failures", "timeouts")

# sweep values per scenario; "ci" trims the sweeps to keep runs short
DEFAULT_SWEEPS = {
    "paper": {
        "crisscross": [10.0],
        "network-size": [10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
        "timeout": [2.0, 5.0, 10.0],
        "initial-replicas": [5, 10, 15, 20, 30, 40, 50],
        "heterogeneity": [0.0, 2.0, 5.0, 10.0],
        "custom": [None],
    },
    "ci": {
        "crisscross": [10.0],
        "network-size": [10, 30, 50],
        "timeout": [2.0, 5.0, 10.0],
        "initial-replicas": [5, 20, 50],
        "heterogeneity": [0.0, 10.0],
        "custom": [None],
    },
}
DEFAULT_REPLICATIONS = {"paper": 100, "ci": 20}

# server size used by the timeout sweep; with 250 the program is feasible for
# every timeout and the sweep would not exercise horizon truncation
TIMEOUT_SERVER_CAPACITY = 125.0

REPORT_COLUMNS = (
    "scenario", "point", "policy", "status", "replications", "horizon",
    "fluid_objective", "solve_seconds", "sim_seconds",
    "holding_cost_mean", "holding_cost_se",
    "avg_response_time_mean", "avg_response_time_se",
    "failures_mean", "failures_se",
    "timeouts_mean", "timeouts_se",
    "message",
)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str
    sweep: list | None = None
    replications: int | None = None
    seed: int = 0
    n_steps: int = 100
    horizon: float | None = None
    out: str | None = None
    policy: str = "both"
    strict_rr: bool = False
    dump_logs: bool = False
    diagrams: bool | None = None
    profile: str = "paper"
    workers: int = 1
    params: dict = field(default_factory=dict)  # builder overrides
    autoscaler: dict = field(default_factory=dict)  # initial/minimum/maximum/idle_scan_period
    spec: dict | str | None = None  # custom scenario: spec document or path

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if self.profile not in DEFAULT_SWEEPS:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if self.sweep is None:
            self.sweep = list(DEFAULT_SWEEPS[self.profile][self.scenario])
        if self.replications is None:
            self.replications = DEFAULT_REPLICATIONS[self.profile]
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not self.sweep:
            raise ConfigError("sweep must not be empty")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.scenario == "custom" and self.spec is None:
            raise ConfigError("the custom scenario needs a spec")
        if self.diagrams is None:
            self.diagrams = self.scenario in ("crisscross", "initial-replicas")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path: str | os.PathLike, **overrides) -> "ExperimentConfig":
        doc = json.loads(Path(path).read_text())
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)


@dataclass
class ReportRow:
    scenario: str
    point: Any
    policy: str
    status: str = "ok"
    replications: int = 0
    horizon: float | None = None
    fluid_objective: float | None = None
    solve_seconds: float | None = None
    sim_seconds: float | None = None
    holding_cost_mean: float | None = None
    holding_cost_se: float | None = None
    avg_response_time_mean: float | None = None
    avg_response_time_se: float | None = None
    failures_mean: float | None = None
    failures_se: float | None = None
    timeouts_mean: float | None = None
    timeouts_se: float | None = None
    message: str = ""

    def mean(self, kpi: str) -> float | None:
        return getattr(self, f"{kpi}_mean")

    def se(self, kpi: str) -> float | None:
        return getattr(self, f"{kpi}_se")


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list[ReportRow]
    samples: dict = field(default_factory=dict, repr=False)  # (point, policy) -> list[SimResult]
    fluid_failures: dict = field(default_factory=dict)  # point -> violated-constraint report
    num_points: int = 0

    def row(self, point, policy: str) -> ReportRow:
        for r in self.rows:
            if r.point == point and r.policy == policy:
                return r
        raise KeyError((point, policy))

    @property
    def all_infeasible(self) -> bool:
        """True when no sweep point has a feasible fluid program."""
        return self.num_points > 0 and len(self.fluid_failures) == self.num_points

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            d = asdict(r)
            w.writerow(["" if d[c] is None else d[c] for c in REPORT_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_csv())


# -- scenario construction ----------------------------------------------------


def default_autoscaler(spec: NetworkSpec, **overrides) -> sim.Autoscaler:
    """Per-function maximum is each hosting server's CPUs split evenly over
    the functions it hosts; initial is 10% of that (at least 1)."""
    K = spec.num_functions
    per_server = [0] * spec.num_servers
    for a in spec.allocations:
        per_server[a.server] += 1
    maximum = []
    for k in range(K):
        share = sum(spec.capacity[spec.allocations[j].server][0] / per_server[spec.allocations[j].server]
                    for j in spec.flows_of(k))
        maximum.append(max(1, int(math.floor(share + 1e-9))))
    initial = [max(1, int(round(0.1 * m))) for m in maximum]
    kw = {"initial": initial, "minimum": 1, "maximum": maximum}
    kw.update(overrides)
    return sim.Autoscaler(**kw)


def build_point(cfg: ExperimentConfig, point) -> NetworkSpec:
    p = dict(cfg.params)
    if cfg.horizon is not None:
        key = "T" if cfg.scenario == "crisscross" else "horizon"
        p.setdefault(key, cfg.horizon)
    if cfg.scenario == "crisscross":
        if point is not None and cfg.horizon is None:
            p.setdefault("T", float(point))
        return build_crisscross(**p)
    if cfg.scenario == "network-size":
        return build_unique_allocation(num_servers=int(point), **p)
    if cfg.scenario == "timeout":
        p.setdefault("server_capacity", TIMEOUT_SERVER_CAPACITY)
        return build_unique_allocation(timeout=float(point), **p)
    if cfg.scenario == "initial-replicas":
        return build_unique_allocation(**p)
    if cfg.scenario == "heterogeneity":
        seed = p.pop("sample_seed", cfg.seed)
        return build_heterogeneous(build_unique_allocation(**p), float(point), seed=seed)
    doc = cfg.spec
    if isinstance(doc, (str, os.PathLike)):
        doc = json.loads(Path(doc).read_text())
    spec = NetworkSpec.from_dict(doc)
    if cfg.horizon is not None:
        spec = replace(spec, horizon=float(cfg.horizon))
    return spec


# -- running ------------------------------------------------------------------


def _one_run(args):
    spec, policy, seed, horizon, strict = args
    return sim.run(spec, policy, seed, horizon, strict_rr=strict)


def run_replications(
    spec: NetworkSpec,
    policy: sim.Policy,
    seeds: Sequence[int],
    horizon: float,
    *,
    strict_rr: bool = False,
    workers: int = 1,
    keep_logs: int = 0,
) -> tuple[list[sim.SimResult], list[list[sim.RequestRecord]]]:
    """Results in seed order; logs kept for the first ``keep_logs`` seeds."""
    jobs = [(spec, policy, s, horizon, strict_rr) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = ex.map(_one_run, jobs)
            return _collect(outs, keep_logs)
    return _collect(map(_one_run, jobs), keep_logs)


def _collect(outs, keep_logs):
    results, logs = [], []
    for i, (res, rlog) in enumerate(outs):
        if i < keep_logs:
            logs.append(rlog)
        else:
            res.replica_trace = []
        results.append(res)
    return results, logs


def summarize(results: Sequence[sim.SimResult]) -> dict[str, tuple[float | None, float | None]]:
    """Mean and standard error of each KPI over replications."""
    out = {}
    for kpi in KPIS:
        vals = np.array([v for v in (getattr(r, kpi) for r in results) if v is not None], float)
        if vals.size == 0:
            out[kpi] = (None, None)
        elif vals.size == 1:
            out[kpi] = (float(vals[0]), None)
        else:
            out[kpi] = (float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size)))
    return out


@dataclass
class _Fluid:
    spec: NetworkSpec  # horizon possibly truncated
    solution: Any = None
    plan: ReplicaPlan | None = None
    seconds: float = 0.0
    error: Exception | None = None


def _solve(cfg: ExperimentConfig, spec: NetworkSpec) -> _Fluid:
    t0 = time.perf_counter()
    try:
        if cfg.scenario == "timeout":
            tmax, sol = max_feasible_horizon(spec, cfg.n_steps)
            if sol is None:
                solve_spec(spec, cfg.n_steps)  # raises with the violated rows
                raise InfeasibleProgram("no positive horizon is feasible")
            spec = replace(spec, horizon=tmax)
        else:
            sol = solve_spec(spec, cfg.n_steps)
        plan = plan_ceiling(sol)
    except (FluidProgramError, PlanningError) as exc:
        return _Fluid(spec, seconds=time.perf_counter() - t0, error=exc)
    return _Fluid(spec, sol, plan, time.perf_counter() - t0)


class _Runner:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out) if cfg.out else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
        self.seeds = [cfg.seed + i for i in range(cfg.replications)]
        if self.out is None:
            self.keep = 0
        else:
            self.keep = cfg.replications if cfg.dump_logs else int(bool(cfg.diagrams))
        self.rows: list[ReportRow] = []
        self.samples: dict = {}
        self.fluid_failures: dict = {}
        self.num_points = 0

    def row(self, point, policy, fluid: _Fluid) -> ReportRow:
        return ReportRow(
            self.cfg.scenario, point, policy,
            horizon=fluid.spec.horizon,
            fluid_objective=None if fluid.solution is None else fluid.solution.objective,
            solve_seconds=fluid.seconds,
        )

    def infeasible(self, point, policy, fluid: _Fluid):
        row = self.row(point, policy, fluid)
        row.status = "infeasible"
        row.message = _describe(fluid.error)
        self.rows.append(row)

    def solve(self, point, spec) -> _Fluid:
        self.num_points += 1
        fluid = _solve(self.cfg, spec)
        if fluid.error is not None:
            self.fluid_failures[point] = _describe(fluid.error)
        self.save_plan(point, fluid)
        return fluid

    def simulate(self, point, pname, policy, fluid: _Fluid):
        cfg = self.cfg
        row = self.row(point, pname, fluid)
        t0 = time.perf_counter()
        results, logs = run_replications(
            fluid.spec, policy, self.seeds, fluid.spec.horizon,
            strict_rr=cfg.strict_rr, workers=cfg.workers, keep_logs=self.keep,
        )
        row.replications = len(results)
        row.sim_seconds = time.perf_counter() - t0
        for kpi, (m, se) in summarize(results).items():
            setattr(row, f"{kpi}_mean", m)
            setattr(row, f"{kpi}_se", se)
        self.rows.append(row)
        self.samples[(point, pname)] = results
        if logs:
            self.write_outputs(point, pname, fluid.spec, results, logs)
        log.info("%s %s %s: cost %.1f", cfg.scenario, point, pname, row.holding_cost_mean or 0.0)

    def save_plan(self, point, fluid: _Fluid):
        if self.out is not None and fluid.plan is not None:
            (self.out / f"plan_{_slug(point)}.json").write_text(fluid.plan.to_json())

    def write_outputs(self, point, pname, spec, results, logs):
        tag = f"{_slug(point)}_{pname}"
        if self.cfg.dump_logs:
            for i, rlog in enumerate(logs):
                seed = self.seeds[i]
                with open(self.out / f"log_{tag}_seed{seed}.csv", "w", newline="") as fh:
                    sim.write_log_csv(rlog, fh)
                (self.out / f"result_{tag}_seed{seed}.json").write_text(results[i].to_json())
        if self.cfg.diagrams:
            export_diagrams(logs[0], results[0].replica_trace, self.out / f"diagrams_{tag}", spec)

    def sweep_point(self, point):
        cfg = self.cfg
        label = "spec" if cfg.scenario == "custom" and point is None else point
        fluid = self.solve(label, build_point(cfg, point))
        if cfg.policy in ("both", "auto"):
            if cfg.scenario == "timeout" and fluid.error is not None:
                # without a feasible horizon there is nothing to simulate for
                self.infeasible(label, "auto", fluid)
            else:
                self.simulate(label, "auto", default_autoscaler(fluid.spec, **cfg.autoscaler), fluid)
        if cfg.policy in ("both", "fluid"):
            if fluid.plan is None:
                self.infeasible(label, "fluid", fluid)
            else:
                self.simulate(label, "fluid", sim.FluidSchedule(fluid.plan), fluid)

    def initial_replicas(self):
        cfg = self.cfg
        spec = build_point(cfg, None)
        fluid = self.solve("fluid", spec)
        if cfg.policy in ("both", "auto"):
            for n in cfg.sweep:
                auto = default_autoscaler(spec, **{**cfg.autoscaler, "initial": int(n)})
                self.simulate(n, "auto", auto, fluid)
        if cfg.policy in ("both", "fluid"):
            if fluid.plan is None:
                self.infeasible("fluid", "fluid", fluid)
            else:
                self.simulate("fluid", "fluid", sim.FluidSchedule(fluid.plan), fluid)


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Build, solve, plan and simulate every sweep point of ``cfg``.

    Replication ``i`` uses seed ``cfg.seed + i`` under both policies, so the
    policies see identical exogenous arrivals.  Infeasible points produce
    rows with status ``infeasible`` instead of aborting the sweep.
    """
    runner = _Runner(cfg)
    if cfg.scenario == "initial-replicas":
        runner.initial_replicas()
    else:
        for point in cfg.sweep:
            runner.sweep_point(point)
    report = ExperimentReport(cfg, runner.rows, runner.samples, runner.fluid_failures, runner.num_points)
    if runner.out is not None:
        report.write_csv(runner.out / "report.csv")
    return report


def _describe(exc: Exception | None) -> str:
    rows = getattr(exc, "rows", ())
    text = str(exc)
    if rows:
        shown = ", ".join(map(str, rows[:8]))
        text += f"; violated rows: {shown}" + (f" (+{len(rows) - 8} more)" if len(rows) > 8 else "")
    return text


def _slug(v) -> str:
    s = str(v)
    return "".join(c if c.isalnum() or c in "-." else "_" for c in s)


def export_diagrams(
    log: Sequence[sim.RequestRecord],
    replica_trace: Iterable[tuple[float, int, int, int]],
    out_dir: str | os.PathLike,
    spec: NetworkSpec,
) -> list[Path]:
    """Write one cumulative arrivals/completions file per function and one
    replica-count step file covering every allocation."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    by_fn: dict[int, list] = {k: [] for k in range(spec.num_functions)}
    for r in log:
        by_fn[r.function].append(r)
    for k in range(spec.num_functions):
        path = out / f"cumulative_function{k}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("time", "arrivals", "completions", "in_system"))
            for row in sim.cumulative_diagram(by_fn[k], k):
                w.writerow((repr(row[0]), row[1], row[2], row[3]))
        written.append(path)
    path = out / "replicas.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("time", "allocation", "function", "active", "alive"))
        for t, j, active, alive in replica_trace:
            w.writerow((repr(t), j, spec.allocations[j].function, active, alive))
    written.append(path)
    return written


def plan_steps(plan: ReplicaPlan) -> list[tuple[float, int, int]]:
    """Replica plan as ``(time, allocation, replicas)`` steps."""
    return [
        (float(plan.breakpoints[n]), j, int(plan.replicas[j, n]))
        for n in range(plan.num_intervals)
        for j in range(plan.replicas.shape[0])
    ]


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "ReportRow",
    "SCENARIOS",
    "build_point",
    "default_autoscaler",
    "export_diagrams",
    "plan_steps",
    "run_experiment",
    "run_replications",
    "summarize",
]
