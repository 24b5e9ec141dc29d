"""Network data model for multi-class queueing networks of serverless functions.

Indices are zero-based throughout: functions ``k``, servers ``i``,
allocations (flows) ``j`` and resources ``m``.  An allocation drains buffer
``allocations[j].function`` on server ``allocations[j].server``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

SPEC_VERSION = "fluidscale-spec/1"


@dataclass(frozen=True)
class Segment:
    """One linear piece of a concave rate curve: ``slope`` fluid per unit time
    per resource unit, valid over ``width`` resource units."""

    slope: float
    width: float


@dataclass(frozen=True)
class Allocation:
    function: int
    server: int


@dataclass(frozen=True)
class NetworkSpec:
    num_functions: int
    num_servers: int
    allocations: tuple[Allocation, ...]
    routing: tuple[tuple[float, ...], ...]  # J x K
    arrival_rate: tuple[float, ...]
    initial_load: tuple[float, ...]
    rate_segments: tuple[tuple[tuple[Segment, ...], ...], ...]  # J x M x L
    capacity: tuple[tuple[float, ...], ...]  # I x M
    holding_cost: tuple[float, ...]
    timeout: tuple[float | None, ...]
    concurrency_cap: tuple[int, ...]
    replica_demand_lb: tuple[tuple[float, ...], ...]  # J x M
    control_lower_bound: tuple[float, ...]
    horizon: float

    @property
    def num_allocations(self) -> int:
        return len(self.allocations)

    @property
    def num_resources(self) -> int:
        return len(self.capacity[0]) if self.capacity else 0

    @property
    def flow_function(self) -> np.ndarray:
        return np.array([a.function for a in self.allocations], dtype=int)

    @property
    def flow_server(self) -> np.ndarray:
        return np.array([a.server for a in self.allocations], dtype=int)

    def routing_matrix(self) -> np.ndarray:
        return np.array(self.routing, dtype=float).reshape(self.num_allocations, self.num_functions)

    def service_rate(self, j: int, demand: Sequence[float] | float = 1.0) -> float:
        """Rate of a single replica of flow ``j`` holding ``demand`` resource units,
        i.e. ``min_m g_j^m(demand_m)`` for the piecewise-linear rate curves."""
        M = self.num_resources
        d = np.broadcast_to(np.asarray(demand, float), (M,))
        rate = math.inf
        for m in range(M):
            left, g = d[m], 0.0
            for seg in self.rate_segments[j][m]:
                take = min(left, seg.width)
                g += seg.slope * take
                left -= take
                if left <= 0:
                    break
            rate = min(rate, g)
        return rate

    def flows_of(self, k: int) -> list[int]:
        return [j for j, a in enumerate(self.allocations) if a.function == k]

    def components(self) -> list[tuple[list[int], list[int]]]:
        """Groups of (functions, servers) coupled by allocations or routing."""
        K, I = self.num_functions, self.num_servers
        parent = list(range(K + I))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

        P = self.routing_matrix()
        for j, a in enumerate(self.allocations):
            union(a.function, K + a.server)
            for k in np.flatnonzero(P[j] > 0):
                union(a.function, int(k))
        groups: dict[int, tuple[list[int], list[int]]] = {}
        for node in range(K + I):
            fs, ss = groups.setdefault(find(node), ([], []))
            (fs if node < K else ss).append(node if node < K else node - K)
        return [g for _, g in sorted(groups.items())]

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": SPEC_VERSION,
            "num_functions": self.num_functions,
            "num_servers": self.num_servers,
            "num_resources": self.num_resources,
            "allocations": [{"function": a.function, "server": a.server} for a in self.allocations],
            "routing": [list(r) for r in self.routing],
            "arrival_rate": list(self.arrival_rate),
            "initial_load": list(self.initial_load),
            "rate_segments": [
                [[{"slope": s.slope, "width": s.width} for s in segs] for segs in per_m]
                for per_m in self.rate_segments
            ],
            "capacity": [list(r) for r in self.capacity],
            "holding_cost": list(self.holding_cost),
            "timeout": list(self.timeout),
            "concurrency_cap": list(self.concurrency_cap),
            "replica_demand_lb": [list(r) for r in self.replica_demand_lb],
            "control_lower_bound": list(self.control_lower_bound),
            "horizon": self.horizon,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkSpec":
        version = doc.get("version")
        if version != SPEC_VERSION:
            raise ValueError(f"unsupported spec version {version!r}")
        return cls(
            num_functions=int(doc["num_functions"]),
            num_servers=int(doc["num_servers"]),
            allocations=tuple(Allocation(int(a["function"]), int(a["server"])) for a in doc["allocations"]),
            routing=tuple(tuple(float(v) for v in r) for r in doc["routing"]),
            arrival_rate=tuple(float(v) for v in doc["arrival_rate"]),
            initial_load=tuple(float(v) for v in doc["initial_load"]),
            rate_segments=tuple(
                tuple(tuple(Segment(float(s["slope"]), float(s["width"])) for s in segs) for segs in per_m)
                for per_m in doc["rate_segments"]
            ),
            capacity=tuple(tuple(float(v) for v in r) for r in doc["capacity"]),
            holding_cost=tuple(float(v) for v in doc["holding_cost"]),
            timeout=tuple(None if v is None else float(v) for v in doc["timeout"]),
            concurrency_cap=tuple(int(v) for v in doc["concurrency_cap"]),
            replica_demand_lb=tuple(tuple(float(v) for v in r) for r in doc["replica_demand_lb"]),
            control_lower_bound=tuple(float(v) for v in doc["control_lower_bound"]),
            horizon=float(doc["horizon"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


def validate(spec: NetworkSpec) -> list[Violation]:
    """Every invariant violation in ``spec``; an empty list means valid."""
    out: list[Violation] = []

    def bad(code, msg):
        out.append(Violation(code, msg))

    K, I, J, M = spec.num_functions, spec.num_servers, spec.num_allocations, spec.num_resources
    if K < 1 or I < 1 or M < 1:
        bad("dimension", f"need at least one function, server and resource (K={K}, I={I}, M={M})")
    per_function = {
        "arrival_rate": spec.arrival_rate,
        "initial_load": spec.initial_load,
        "holding_cost": spec.holding_cost,
        "timeout": spec.timeout,
        "concurrency_cap": spec.concurrency_cap,
    }
    for name, vec in per_function.items():
        if len(vec) != K:
            bad("dimension", f"{name} has {len(vec)} entries, expected {K}")
    per_flow = {
        "routing": spec.routing,
        "rate_segments": spec.rate_segments,
        "replica_demand_lb": spec.replica_demand_lb,
        "control_lower_bound": spec.control_lower_bound,
    }
    for name, vec in per_flow.items():
        if len(vec) != J:
            bad("dimension", f"{name} has {len(vec)} entries, expected {J}")
    if len(spec.capacity) != I or any(len(r) != M for r in spec.capacity):
        bad("dimension", f"capacity must be {I} x {M}")
    if out:
        return out

    seen: dict[tuple[int, int], int] = {}
    for j, a in enumerate(spec.allocations):
        if not (0 <= a.function < K):
            bad("bad_index", f"allocation {j} names function {a.function} outside [0, {K})")
        if not (0 <= a.server < I):
            bad("bad_index", f"allocation {j} names server {a.server} outside [0, {I})")
        key = (a.function, a.server)
        if key in seen:
            bad("duplicate_allocation", f"allocations {seen[key]} and {j} both serve function {a.function} on server {a.server}")
        seen[key] = j

    for j, row in enumerate(spec.routing):
        if len(row) != K:
            bad("dimension", f"routing row {j} has {len(row)} entries, expected {K}")
            continue
        if any(p < 0 for p in row):
            bad("negative_probability", f"routing row {j} has a negative entry")
        if sum(row) > 1 + 1e-12:
            bad("routing_mass", f"routing mass {sum(row):g} > 1 for allocation {j}")
        f = spec.allocations[j].function
        if 0 <= f < K and row[f] != 0:
            bad("self_routing", f"allocation {j} routes back into its own buffer {f}")

    for k in range(K):
        if spec.arrival_rate[k] < 0 or not math.isfinite(spec.arrival_rate[k]):
            bad("negative_rate", f"arrival rate of function {k} must be finite and >= 0")
        if spec.initial_load[k] < 0:
            bad("negative_load", f"initial load of function {k} is negative")
        if spec.holding_cost[k] <= 0:
            bad("nonpositive_cost", f"holding cost of function {k} must be > 0")
        tau = spec.timeout[k]
        if tau is not None and tau <= 0:
            bad("nonpositive_timeout", f"timeout of function {k} must be > 0")
        if spec.concurrency_cap[k] < 1:
            bad("nonpositive_concurrency", f"concurrency cap of function {k} must be >= 1")

    for j in range(J):
        if len(spec.rate_segments[j]) != M:
            bad("dimension", f"rate_segments[{j}] has {len(spec.rate_segments[j])} resources, expected {M}")
            continue
        for m, segs in enumerate(spec.rate_segments[j]):
            if not segs:
                bad("dimension", f"flow {j} resource {m} has no rate segments")
            for seg in segs:
                if seg.slope <= 0 or seg.width <= 0:
                    bad("nonpositive_segment", f"flow {j} resource {m} has a segment with slope/width <= 0")
            slopes = [s.slope for s in segs]
            if any(b > a for a, b in zip(slopes, slopes[1:])):
                bad("nonconcave", f"flow {j} resource {m} slopes increase (curve not concave)")
        if len(spec.replica_demand_lb[j]) != M:
            bad("dimension", f"replica_demand_lb[{j}] must have {M} entries")
        elif any(v < 0 for v in spec.replica_demand_lb[j]):
            bad("negative_demand", f"replica demand lower bound of flow {j} is negative")
        if spec.control_lower_bound[j] < 0:
            bad("negative_control_bound", f"control lower bound of flow {j} is negative")

    for i, row in enumerate(spec.capacity):
        if any(v <= 0 for v in row):
            bad("nonpositive_capacity", f"server {i} has a non-positive capacity")
    if not spec.horizon > 0:
        bad("nonpositive_horizon", "horizon must be > 0")
    return out


# -- control and buffer trajectories --------------------------------------


@dataclass(frozen=True, eq=False)
class ControlTrajectory:
    """Piecewise-constant controls: ``eta[j, m, n]`` resource units and
    ``u[j, n]`` service rate on ``[breakpoints[n], breakpoints[n+1])``."""

    breakpoints: np.ndarray
    eta: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.breakpoints, float)
        eta = np.asarray(self.eta, float)
        u = np.asarray(self.u, float)
        if eta.ndim == 2:
            eta = eta[:, None, :]
        object.__setattr__(self, "breakpoints", t)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "u", u)
        if t.ndim != 1 or t.size < 2 or t[0] != 0 or np.any(np.diff(t) <= 0):
            raise ValueError("breakpoints must start at 0 and be strictly increasing")
        N = t.size - 1
        if u.ndim != 2 or u.shape[1] != N or eta.shape[0] != u.shape[0] or eta.shape[2] != N:
            raise ValueError("control arrays do not match the breakpoint grid")
        if np.any(u < 0) or np.any(eta < 0):
            raise ValueError("controls must be non-negative")

    @property
    def num_intervals(self) -> int:
        return self.breakpoints.size - 1

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    def to_dict(self) -> dict:
        return {
            "breakpoints": self.breakpoints.tolist(),
            "eta": self.eta.tolist(),
            "u": self.u.tolist(),
        }

    @classmethod
    def constant(cls, u: Sequence[float], horizon: float, eta: Sequence[float] | None = None) -> "ControlTrajectory":
        u = np.asarray(u, float)[:, None]
        e = u.copy() if eta is None else np.asarray(eta, float).reshape(len(u), -1)[:, :, None]
        return cls(np.array([0.0, horizon]), e, u)


@dataclass(frozen=True, eq=False)
class BufferTrajectory:
    """Buffer levels ``values[k, n]`` at ``breakpoints[n]``, linear in between."""

    breakpoints: np.ndarray
    values: np.ndarray

    def at(self, t: float | np.ndarray) -> np.ndarray:
        """Buffer levels at time(s) ``t``; shape ``(K,)`` or ``(K, len(t))``."""
        t = np.asarray(t, float)
        out = np.array([np.interp(t, self.breakpoints, row) for row in self.values])
        return out

    def negative_regions(self, tol: float = 0.0) -> dict[int, list[tuple[float, float]]]:
        """Open/closed time spans where ``x_k(t) < -tol``, per function."""
        regions: dict[int, list[tuple[float, float]]] = {}
        t = self.breakpoints
        for k, row in enumerate(self.values):
            spans: list[tuple[float, float]] = []
            for n in range(t.size - 1):
                a, b = row[n] + tol, row[n + 1] + tol
                if a >= 0 and b >= 0:
                    continue
                if a < 0 and b < 0:
                    lo, hi = t[n], t[n + 1]
                elif a < 0:
                    lo, hi = t[n], t[n] + (t[n + 1] - t[n]) * a / (a - b)
                else:
                    lo, hi = t[n] + (t[n + 1] - t[n]) * a / (a - b), t[n + 1]
                if spans and abs(spans[-1][1] - lo) <= 1e-12:
                    spans[-1] = (spans[-1][0], hi)
                else:
                    spans.append((lo, hi))
            if spans:
                regions[k] = spans
        return regions

    @property
    def has_negative(self) -> bool:
        return bool(np.any(self.values < 0))

    def integral(self, weights: Sequence[float] | None = None) -> float:
        """Exact integral of ``sum_k w_k x_k(t)`` (trapezoid on a linear path)."""
        w = np.ones(self.values.shape[0]) if weights is None else np.asarray(weights, float)
        dt = np.diff(self.breakpoints)
        mid = 0.5 * (self.values[:, :-1] + self.values[:, 1:])
        return float(w @ (mid @ dt))


def evaluate_buffers(spec: NetworkSpec, ctrl: ControlTrajectory) -> BufferTrajectory:
    """Integrate the fluid dynamics exactly for piecewise-constant controls.

    Negative excursions are kept (see :meth:`BufferTrajectory.negative_regions`).
    """
    J, K = spec.num_allocations, spec.num_functions
    if ctrl.u.shape[0] != J:
        raise ValueError(f"control has {ctrl.u.shape[0]} flows, spec has {J}")
    # net[k, j]: effect of one unit of flow j on buffer k
    net = spec.routing_matrix().T.copy()
    net[spec.flow_function, np.arange(J)] -= 1.0
    lam = np.asarray(spec.arrival_rate, float)
    dt = ctrl.durations
    drift = lam[:, None] + net @ ctrl.u  # K x N
    values = np.empty((K, dt.size + 1))
    values[:, 0] = spec.initial_load
    values[:, 1:] = values[:, :1] + np.cumsum(drift * dt, axis=1)
    return BufferTrajectory(ctrl.breakpoints.copy(), values)


def departed_mass(spec: NetworkSpec, ctrl: ControlTrajectory) -> np.ndarray:
    """Fluid that has left the network by each breakpoint."""
    exit_frac = 1.0 - spec.routing_matrix().sum(axis=1)
    served = np.concatenate([[0.0], np.cumsum((exit_frac @ ctrl.u) * ctrl.durations)])
    return served


# -- scenario builders ----------------------------------------------------


def _check_positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v!r}")


def build_crisscross(
    lambda1: float = 6.0,
    lambda2: float = 6.0,
    mu1: float = 1.0,
    mu2: float = 1.0,
    mu3: float = 1.0,
    b1: float = 16.0,
    b2: float = 8.0,
    alpha: float | Sequence[float] = 40.0,
    T: float = 10.0,
    y: int = 10,
    eta_min: float = 1.0,
) -> NetworkSpec:
    """Two servers, three functions: 1 and 2 on server 1, 3 on server 2;
    every completion of function 2 becomes a request of function 3.

    A scalar ``alpha`` loads buffers 1 and 2; buffer 3 starts empty.
    """
    _check_positive(lambda1=lambda1, lambda2=lambda2, mu1=mu1, mu2=mu2, mu3=mu3, b1=b1, b2=b2, T=T)
    a = (float(alpha), float(alpha), 0.0) if np.isscalar(alpha) else tuple(float(v) for v in alpha)
    if len(a) != 3 or min(a) < 0:
        raise ValueError("alpha must be a non-negative scalar or 3 values")
    allocs = (Allocation(0, 0), Allocation(1, 0), Allocation(2, 1))
    widths = (b1, b1, b2)
    return NetworkSpec(
        num_functions=3,
        num_servers=2,
        allocations=allocs,
        routing=((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 0.0, 0.0)),
        arrival_rate=(float(lambda1), float(lambda2), 0.0),
        initial_load=a,
        rate_segments=tuple(((Segment(float(mu), float(w)),),) for mu, w in zip((mu1, mu2, mu3), widths)),
        capacity=((float(b1),), (float(b2),)),
        holding_cost=(1.0, 1.0, 1.0),
        timeout=(None, None, None),
        concurrency_cap=(y, y, y),
        replica_demand_lb=((1.0,), (1.0,), (1.0,)),
        control_lower_bound=(eta_min, eta_min, eta_min),
        horizon=float(T),
    )


def build_unique_allocation(
    num_servers: int = 10,
    funcs_per_server: int = 5,
    lambda_: float = 100.0,
    mu: float = 2.1,
    server_capacity: float = 250.0,
    alpha0: float = 100.0,
    y: int = 100,
    horizon: float = 10.0,
    timeout: float | None = None,
    cost: float = 1.0,
    eta_min: float = 1.0,
) -> NetworkSpec:
    """Each server hosts its own ``funcs_per_server`` functions; no routing."""
    if num_servers < 1 or funcs_per_server < 1:
        raise ValueError("need at least one server and one function per server")
    K = num_servers * funcs_per_server
    allocs = tuple(Allocation(k, k // funcs_per_server) for k in range(K))
    seg = ((Segment(float(mu), float(server_capacity)),),)
    return NetworkSpec(
        num_functions=K,
        num_servers=num_servers,
        allocations=allocs,
        routing=tuple((0.0,) * K for _ in range(K)),
        arrival_rate=(float(lambda_),) * K,
        initial_load=(float(alpha0),) * K,
        rate_segments=(seg,) * K,
        capacity=((float(server_capacity),),) * num_servers,
        holding_cost=(float(cost),) * K,
        timeout=(timeout,) * K,
        concurrency_cap=(int(y),) * K,
        replica_demand_lb=((1.0,),) * K,
        control_lower_bound=(float(eta_min),) * K,
        horizon=float(horizon),
    )


def build_heterogeneous(base: NetworkSpec, spread: float, seed: int | None = 0) -> NetworkSpec:
    """Resample each function's arrival and processing rates from
    ``U[100, 100 + 2.1 * spread]`` and apply them relative to a base value of 100.

    The arrival rate becomes ``base_rate * draw / 100`` and every rate segment
    of the function's flows is scaled by ``draw / 100``, so ``spread = 0``
    reproduces ``base`` exactly.
    """
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    K = base.num_functions
    hi = 100.0 + 2.1 * spread
    lam_draw = rng.uniform(100.0, hi, size=K)
    proc_draw = rng.uniform(100.0, hi, size=K)
    # factors are exactly 1.0 when spread == 0
    lam_factor = lam_draw / 100.0
    proc_factor = proc_draw / 100.0
    lam = tuple(float(base.arrival_rate[k] * lam_factor[k]) for k in range(K))
    segs = tuple(
        tuple(
            tuple(Segment(s.slope * float(proc_factor[a.function]), s.width) for s in per_m)
            for per_m in base.rate_segments[j]
        )
        for j, a in enumerate(base.allocations)
    )
    return replace(base, arrival_rate=lam, rate_segments=segs)
