"""Request-level discrete-event simulation of a serverless function network.

Arrivals form one Poisson stream with rate ``sum(lambda)``; each arrival's
function is drawn with probabilities ``lambda_k / sum(lambda)``.  A
per-function load balancer walks its replicas round-robin; a replica admits
a request while it holds fewer than ``y_k`` requests (in service plus
queued).  Replicas serve FCFS with exponential service times.  Completions
either spawn a request of another function (instantly) or leave.

Random numbers come from four independent streams derived from the seed
(arrivals, types, services, routing), so changing the policy never moves
the exogenous arrival sample path.
"""

from __future__ import annotations

import bisect
import csv
import enum
import heapq
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .model import NetworkSpec
from .planner import ReplicaPlan

_ARRIVAL, _COMPLETE, _TIMEOUT, _SCALE, _SCAN = range(5)
_STREAMS = ("arrivals", "types", "services", "routing")


class Outcome(str, enum.Enum):
    COMPLETED = "completed"
    FAILED_ON_ARRIVAL = "failed_on_arrival"
    TIMED_OUT = "timed_out"
    IN_SYSTEM_AT_END = "in_system_at_end"


@dataclass(slots=True)
class RequestRecord:
    id: int
    function: int
    arrival: float
    start: float | None = None
    completion: float | None = None
    outcome: Outcome | None = None
    parent: int | None = None
    removed: float | None = None


RequestLog = list  # list[RequestRecord], ordered by id


@dataclass(frozen=True)
class Autoscaler:
    """Reactive policy: one more replica after each placement failure, idle
    replicas removed down to ``minimum``.  Counts are per function (scalars
    broadcast)."""

    initial: int | Sequence[int] = 5
    minimum: int | Sequence[int] = 1
    maximum: int | Sequence[int] = 50
    idle_scan_period: float = 0.1


@dataclass(frozen=True)
class FluidSchedule:
    plan: ReplicaPlan


Policy = Union[Autoscaler, FluidSchedule]


@dataclass
class SimResult:
    holding_cost: float
    avg_response_time: float | None
    failures: int
    timeouts: int
    completed: int
    arrivals: int
    in_system_at_end: int
    horizon: float
    per_function: dict[str, list[int]] = field(default_factory=dict)
    replica_trace: list[tuple[float, int, int, int]] = field(default_factory=list, repr=False)

    def to_dict(self, include_trace: bool = False) -> dict:
        out = {
            "holding_cost": self.holding_cost,
            "avg_response_time": self.avg_response_time,
            "failures": self.failures,
            "timeouts": self.timeouts,
            "completed": self.completed,
            "arrivals": self.arrivals,
            "in_system_at_end": self.in_system_at_end,
            "horizon": self.horizon,
            "per_function": self.per_function,
        }
        if include_trace:
            out["replica_trace"] = [list(r) for r in self.replica_trace]
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


class SimulationError(Exception):
    pass


class _Stream:
    """Buffered draws from one numpy generator."""

    __slots__ = ("_rng", "_kind", "_buf", "_i", "_size")

    def __init__(self, rng: np.random.Generator, kind: str, size: int = 4096):
        self._rng, self._kind, self._size = rng, kind, size
        self._buf: list[float] = []
        self._i = 0

    def next(self) -> float:
        if self._i >= len(self._buf):
            if self._kind == "exp":
                self._buf = self._rng.standard_exponential(self._size).tolist()
            else:
                self._buf = self._rng.random(self._size).tolist()
            self._i = 0
        v = self._buf[self._i]
        self._i += 1
        return v


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


class _Replica:
    __slots__ = ("id", "flow", "function", "server", "rate", "demand", "queue", "current", "count", "draining", "alive")

    def __init__(self, rid, flow, function, server, rate, demand):
        self.id = rid
        self.flow = flow
        self.function = function
        self.server = server
        self.rate = rate
        self.demand = demand
        self.queue: deque = deque()
        self.current = None
        self.count = 0
        self.draining = False
        self.alive = True


def _per_function(value, K: int, name: str) -> list[int]:
    if np.isscalar(value):
        return [int(value)] * K
    vals = [int(v) for v in value]
    if len(vals) != K:
        raise SimulationError(f"{name} needs {K} entries")
    return vals


class _Simulation:
    def __init__(self, spec: NetworkSpec, policy: Policy, seed: int, horizon: float, strict_rr: bool):
        self.spec = spec
        self.policy = policy
        self.horizon = horizon
        self.strict = strict_rr
        K, J = spec.num_functions, spec.num_allocations
        rngs = make_streams(seed)
        self.s_arr = _Stream(rngs["arrivals"], "exp")
        self.s_type = _Stream(rngs["types"], "uniform")
        self.s_svc = _Stream(rngs["services"], "exp")
        self.s_route = _Stream(rngs["routing"], "uniform")

        lam = list(spec.arrival_rate)
        self.total_rate = float(sum(lam))
        acc, cum = 0.0, []
        for v in lam:
            acc += v
            cum.append(acc / self.total_rate if self.total_rate > 0 else 0.0)
        self.type_cum = cum
        P = spec.routing_matrix()
        self.route_cum: list[list[float] | None] = []
        for j in range(J):
            row = P[j]
            self.route_cum.append(np.cumsum(row).tolist() if row.sum() > 0 else None)
        self.flow_fn = [a.function for a in spec.allocations]
        self.flow_srv = [a.server for a in spec.allocations]
        self.flows_of = [spec.flows_of(k) for k in range(K)]
        self.y = list(spec.concurrency_cap)
        self.tau = list(spec.timeout)
        self.cap = [None if t is None else math.ceil(spec.arrival_rate[k] * t - 1e-9) for k, t in enumerate(spec.timeout)]
        self.capacity0 = [row[0] for row in spec.capacity]

        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.records: list[RequestRecord] = []
        self.insys = [0] * K
        self.active: list[list[_Replica]] = [[] for _ in range(K)]
        self.rr = [0] * K
        self.by_flow: list[list[_Replica]] = [[] for _ in range(J)]
        self.used = [0.0] * spec.num_servers
        self.next_rep = 0
        self.trace: list[tuple[float, int, int, int]] = []

        if isinstance(policy, Autoscaler):
            self.auto = True
            self.a_init = _per_function(policy.initial, K, "initial")
            self.a_min = _per_function(policy.minimum, K, "minimum")
            self.a_max = _per_function(policy.maximum, K, "maximum")
            if any(not (lo <= i <= hi) for lo, i, hi in zip(self.a_min, self.a_init, self.a_max)):
                raise SimulationError("autoscaler needs minimum <= initial <= maximum")
            if policy.idle_scan_period <= 0:
                raise SimulationError("idle scan period must be positive")
            self.rate1 = [float(spec.service_rate(j, 1.0)) for j in range(J)]
        elif isinstance(policy, FluidSchedule):
            self.auto = False
            plan = policy.plan
            if plan.replicas.shape[0] != J:
                raise SimulationError("plan has a different number of allocations than the spec")
            if plan.breakpoints[0] != 0 or np.any(np.diff(plan.breakpoints) <= 0):
                raise SimulationError("plan breakpoints must start at 0 and increase")
            self.plan_rate = [float(spec.service_rate(j, plan.demand[j])) for j in range(J)]
            self.plan_demand = [float(plan.demand[j][0]) for j in range(J)]
        else:
            raise SimulationError(f"unknown policy {policy!r}")

    # -- event helpers ---------------------------------------------------

    def push(self, t, kind, obj):
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, obj))

    def _trace(self, j):
        reps = self.by_flow[j]
        live = sum(1 for r in reps if not r.draining)
        self.trace.append((self.now, j, live, len(reps)))

    def add_replica(self, j, rate, demand) -> _Replica:
        rep = _Replica(self.next_rep, j, self.flow_fn[j], self.flow_srv[j], rate, demand)
        self.next_rep += 1
        self.by_flow[j].append(rep)
        self.active[rep.function].append(rep)
        self.used[rep.server] += demand
        self._trace(j)
        return rep

    def remove_replica(self, rep: _Replica):
        rep.alive = False
        if not rep.draining:
            lst = self.active[rep.function]
            idx = lst.index(rep)
            del lst[idx]
            if idx < self.rr[rep.function]:
                self.rr[rep.function] -= 1
        self.by_flow[rep.flow].remove(rep)
        self.used[rep.server] -= rep.demand
        self._trace(rep.flow)

    def drain_replica(self, rep: _Replica):
        lst = self.active[rep.function]
        idx = lst.index(rep)
        del lst[idx]
        if idx < self.rr[rep.function]:
            self.rr[rep.function] -= 1
        rep.draining = True
        if rep.count == 0:
            self.remove_replica(rep)
        else:
            self._trace(rep.flow)

    # -- policies ----------------------------------------------------------

    def _auto_scale_up(self, k) -> bool:
        if len(self.active[k]) >= self.a_max[k]:
            return False
        best, room = None, 0.0
        for j in self.flows_of[k]:
            free = self.capacity0[self.flow_srv[j]] - self.used[self.flow_srv[j]]
            if free >= 1.0 - 1e-9 and (best is None or free > room):
                best, room = j, free
        if best is None:
            return False
        self.add_replica(best, self.rate1[best], 1.0)
        return True

    def _set_target(self, j, target):
        reps = self.by_flow[j]
        live = [r for r in reps if not r.draining]
        have = len(live)
        if target > have:
            draining = sorted((r for r in reps if r.draining), key=lambda r: (-r.count, r.id))
            for rep in draining[: target - have]:
                rep.draining = False
                self.active[rep.function].append(rep)
                self._trace(j)
            have += min(len(draining), target - have)
            for _ in range(target - have):
                self.add_replica(j, self.plan_rate[j], self.plan_demand[j])
        elif target < have:
            victims = sorted(live, key=lambda r: (r.count, -r.id))[: have - target]
            for rep in victims:
                self.drain_replica(rep)

    def _apply_plan(self, n):
        counts = self.policy.plan.replicas[:, n]
        for j, target in enumerate(counts):
            self._set_target(j, int(target))

    # -- request handling --------------------------------------------------

    def new_request(self, k, parent=None) -> RequestRecord:
        req = RequestRecord(len(self.records), k, self.now, parent=parent)
        self.records.append(req)
        return req

    def place(self, req: RequestRecord):
        k = req.function
        cap = self.cap[k]
        if cap is not None and self.insys[k] >= cap:
            req.outcome = Outcome.FAILED_ON_ARRIVAL
            return
        reps = self.active[k]
        n = len(reps)
        y = self.y[k]
        chosen = None
        if n:
            p = self.rr[k] % n
            if self.strict:
                rep = reps[p]
                self.rr[k] = (p + 1) % n
                if rep.count < y:
                    chosen = rep
            else:
                for i in range(n):
                    idx = p + i
                    if idx >= n:
                        idx -= n
                    rep = reps[idx]
                    if rep.count < y:
                        chosen = rep
                        self.rr[k] = idx + 1 if idx + 1 < n else 0
                        break
        if chosen is None:
            req.outcome = Outcome.FAILED_ON_ARRIVAL
            if self.auto:
                self._auto_scale_up(k)
            return
        chosen.count += 1
        self.insys[k] += 1
        if chosen.current is None:
            self.start(chosen, req)
        else:
            chosen.queue.append(req)
            tau = self.tau[k]
            if tau is not None:
                self.push(self.now + tau, _TIMEOUT, (req, chosen))

    def start(self, rep: _Replica, req: RequestRecord):
        req.start = self.now
        rep.current = req
        self.push(self.now + self.s_svc.next() / rep.rate, _COMPLETE, rep)

    def complete(self, rep: _Replica):
        req = rep.current
        req.completion = self.now
        req.outcome = Outcome.COMPLETED
        rep.current = None
        rep.count -= 1
        self.insys[rep.function] -= 1
        q = rep.queue
        while q:
            nxt = q.popleft()
            if nxt.outcome is None:
                self.start(rep, nxt)
                break
        cum = self.route_cum[rep.flow]
        if cum is not None:
            u = self.s_route.next()
            k2 = bisect.bisect_right(cum, u)
            if k2 < len(cum):
                child = self.new_request(k2, parent=req.id)
                self.place(child)
        if rep.count == 0:
            self.on_idle(rep)

    def on_idle(self, rep: _Replica):
        if not rep.alive:
            return
        if rep.draining:
            self.remove_replica(rep)
        elif self.auto and len(self.active[rep.function]) > self.a_min[rep.function]:
            self.remove_replica(rep)

    def timeout(self, req: RequestRecord, rep: _Replica):
        if req.start is not None or req.outcome is not None:
            return
        req.outcome = Outcome.TIMED_OUT
        req.removed = self.now
        rep.count -= 1
        self.insys[req.function] -= 1

    def idle_scan(self):
        for k, reps in enumerate(self.active):
            if len(reps) <= self.a_min[k]:
                continue
            for rep in reps:
                if rep.count == 0:
                    self.remove_replica(rep)
                    break

    # -- main loop ---------------------------------------------------------

    def run(self) -> list[RequestRecord]:
        spec = self.spec
        K = spec.num_functions
        if self.auto:
            for k in range(K):
                flows = self.flows_of[k]
                for c in range(self.a_init[k]):
                    if flows:
                        j = flows[c % len(flows)]
                        self.add_replica(j, self.rate1[j], 1.0)
            self.push(self.policy.idle_scan_period, _SCAN, None)
        else:
            self._apply_plan(0)
            for n, t in enumerate(self.policy.plan.breakpoints[1:-1], start=1):
                if t < self.horizon:
                    self.push(float(t), _SCALE, n)
        for k in range(K):
            for _ in range(int(round(spec.initial_load[k]))):
                self.place(self.new_request(k))
        if self.total_rate > 0:
            self.push(self.s_arr.next() / self.total_rate, _ARRIVAL, None)

        heap = self.heap
        horizon = self.horizon
        type_cum = self.type_cum
        pop = heapq.heappop
        while heap:
            t, _, kind, obj = pop(heap)
            if t > horizon:
                break
            self.now = t
            if kind == _COMPLETE:
                self.complete(obj)
            elif kind == _ARRIVAL:
                k = bisect.bisect_right(type_cum, self.s_type.next())
                if k >= K:
                    k = K - 1
                self.place(self.new_request(k))
                self.push(t + self.s_arr.next() / self.total_rate, _ARRIVAL, None)
            elif kind == _TIMEOUT:
                self.timeout(*obj)
            elif kind == _SCALE:
                self._apply_plan(obj)
            else:
                self.idle_scan()
                self.push(t + self.policy.idle_scan_period, _SCAN, None)
        self.now = horizon
        for req in self.records:
            if req.outcome is None:
                req.outcome = Outcome.IN_SYSTEM_AT_END
        return self.records


def run(
    spec: NetworkSpec,
    policy: Policy,
    seed: int = 0,
    horizon: float | None = None,
    *,
    strict_rr: bool = False,
) -> tuple[SimResult, list[RequestRecord]]:
    """Simulate ``spec`` under ``policy`` until ``horizon`` (default ``spec.horizon``)."""
    horizon = spec.horizon if horizon is None else float(horizon)
    if horizon > spec.horizon + 1e-12:
        raise SimulationError("horizon exceeds the spec horizon")
    sim = _Simulation(spec, policy, seed, horizon, strict_rr)
    log = sim.run()
    result = compute_metrics(log, spec, horizon)
    result.replica_trace = sim.trace
    return result, log


def compute_metrics(log: Iterable[RequestRecord], spec: NetworkSpec, horizon: float) -> SimResult:
    K = spec.num_functions
    cost = spec.holding_cost
    holding = 0.0
    resp_sum, completed = 0.0, 0
    failures = timeouts = at_end = arrivals = 0
    by_fn = {name: [0] * K for name in ("arrivals", "completed", "failed", "timed_out", "in_system_at_end")}
    for r in log:
        arrivals += 1
        k = r.function
        by_fn["arrivals"][k] += 1
        o = r.outcome
        if o is Outcome.COMPLETED:
            sojourn = r.completion - r.arrival
            holding += cost[k] * sojourn
            resp_sum += sojourn
            completed += 1
            by_fn["completed"][k] += 1
        elif o is Outcome.TIMED_OUT:
            removed = r.removed if r.removed is not None else r.arrival + spec.timeout[k]
            holding += cost[k] * (removed - r.arrival)
            timeouts += 1
            by_fn["timed_out"][k] += 1
        elif o is Outcome.IN_SYSTEM_AT_END:
            holding += cost[k] * (horizon - r.arrival)
            at_end += 1
            by_fn["in_system_at_end"][k] += 1
        elif o is Outcome.FAILED_ON_ARRIVAL:
            failures += 1
            by_fn["failed"][k] += 1
        else:
            raise SimulationError(f"request {r.id} has no outcome; log is not closed")
    return SimResult(
        holding_cost=holding,
        avg_response_time=resp_sum / completed if completed else None,
        failures=failures,
        timeouts=timeouts,
        completed=completed,
        arrivals=arrivals,
        in_system_at_end=at_end,
        horizon=horizon,
        per_function=by_fn,
    )


# -- exports -----------------------------------------------------------------

LOG_COLUMNS = ("id", "function", "arrival", "start", "completion", "outcome", "parent", "removed")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, Outcome):
        return v.value
    return str(v)


def write_log_csv(log: Iterable[RequestRecord], stream: io.TextIOBase) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in log:
        w.writerow([_fmt(getattr(r, c)) for c in LOG_COLUMNS])


def log_to_csv(log: Iterable[RequestRecord]) -> str:
    buf = io.StringIO()
    write_log_csv(log, buf)
    return buf.getvalue()


def read_log_csv(stream: io.TextIOBase) -> list[RequestRecord]:
    out = []
    for row in csv.DictReader(stream):
        def f(name):
            v = row[name]
            return float(v) if v else None

        out.append(RequestRecord(
            id=int(row["id"]),
            function=int(row["function"]),
            arrival=float(row["arrival"]),
            start=f("start"),
            completion=f("completion"),
            outcome=Outcome(row["outcome"]),
            parent=int(row["parent"]) if row["parent"] else None,
            removed=f("removed"),
        ))
    return out


def cumulative_diagram(log: Sequence[RequestRecord], k: int) -> list[tuple[float, int, int, int]]:
    """Step function rows ``(time, arrivals, completions, in_system)`` for function ``k``.

    Arrivals count admitted requests; ``in_system`` also nets out timeouts.
    """
    events = []
    for r in log:
        if r.function != k or r.outcome is Outcome.FAILED_ON_ARRIVAL:
            continue
        events.append((r.arrival, 0))
        if r.outcome is Outcome.COMPLETED:
            events.append((r.completion, 1))
        elif r.outcome is Outcome.TIMED_OUT:
            events.append((r.removed, 2))
    events.sort()
    arr = comp = gone = 0
    rows = []
    for t, what in events:
        if what == 0:
            arr += 1
        elif what == 1:
            comp += 1
        else:
            gone += 1
        rows.append((t, arr, comp, arr - comp - gone))
    return rows
