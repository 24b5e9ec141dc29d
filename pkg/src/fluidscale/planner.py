"""Turn fluid resource allocations into integer replica schedules."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fluid import FluidSolution
from .model import NetworkSpec

COVER_EPS = 1e-9


class PlanningError(Exception):
    pass


class Unsatisfiable(PlanningError):
    """No scanned per-replica demand fits the servers.

    ``row`` is ``(server, interval, resource)`` of a capacity row that stays
    violated.
    """

    def __init__(self, message: str, row: tuple[int, int, int]):
        super().__init__(message)
        self.row = row


@dataclass(frozen=True, eq=False)
class ReplicaPlan:
    breakpoints: np.ndarray  # N + 1
    replicas: np.ndarray  # J x N, integers
    demand: np.ndarray  # J x M, resource units per replica
    weights: np.ndarray  # M

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def num_intervals(self) -> int:
        return self.replicas.shape[1]

    def cost(self) -> float:
        """Weighted resource-time of the plan: sum over n, m, j of tau_n w_m d_jm r_jn."""
        usage = np.einsum("m,jm,jn->n", self.weights, self.demand, self.replicas)
        return float(usage @ self.durations)

    def replicas_at(self, t: float) -> np.ndarray:
        n = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        n = min(max(n, 0), self.num_intervals - 1)
        return self.replicas[:, n]

    def to_dict(self) -> dict:
        return {
            "interval_lengths": self.durations.tolist(),
            "breakpoints": self.breakpoints.tolist(),
            "replicas": self.replicas.tolist(),
            "demand": self.demand.tolist(),
            "weights": self.weights.tolist(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> "ReplicaPlan":
        if "breakpoints" in doc:
            t = np.asarray(doc["breakpoints"], float)
        else:
            t = np.concatenate([[0.0], np.cumsum(doc["interval_lengths"])])
        return cls(
            t,
            np.asarray(doc["replicas"], dtype=np.int64),
            np.asarray(doc["demand"], float),
            np.asarray(doc.get("weights", [1.0] * len(doc["demand"][0])), float),
        )

    @classmethod
    def from_json(cls, text: str) -> "ReplicaPlan":
        return cls.from_dict(json.loads(text))

    def check(self, spec: NetworkSpec, eta: np.ndarray | None = None, tol: float = 1e-9) -> list[str]:
        """Violated plan invariants (coverage needs the fluid ``eta``)."""
        problems = []
        dmin = np.asarray(spec.replica_demand_lb, float)
        if np.any(self.demand < dmin - tol):
            problems.append("demand below replica_demand_lb")
        if np.any(self.replicas < 0):
            problems.append("negative replica count")
        usage = self.demand[:, :, None] * self.replicas[:, None, :]  # J x M x N
        sj = spec.flow_server
        for i in range(spec.num_servers):
            load = usage[sj == i].sum(axis=0)
            cap = np.asarray(spec.capacity[i], float)[:, None]
            if np.any(load > cap + tol):
                problems.append(f"server {i} over capacity")
        if eta is not None and np.any(usage < eta - tol):
            problems.append("replicas do not cover the fluid allocation")
        return problems


def plan_ceiling(sol: FluidSolution) -> ReplicaPlan:
    """One resource unit per replica, ``ceil(eta)`` replicas per interval."""
    spec = sol.spec
    if spec.num_resources != 1:
        raise PlanningError("the ceiling rule needs a single resource")
    eta = sol.control.eta[:, 0, :]
    r = np.ceil(eta - COVER_EPS).astype(np.int64)
    r = np.maximum(r, 0)
    J = spec.num_allocations
    return ReplicaPlan(sol.control.breakpoints.copy(), r, np.ones((J, 1)), np.ones(1))


def _replicas_for(eta_j: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Smallest replica counts with d * r >= eta for every resource (eta_j is M x N)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where(eta_j > 0, np.ceil(eta_j / d[:, None] - COVER_EPS), 0.0)
    r = need.max(axis=0).astype(np.int64)
    # guard the epsilon: bump any interval still short of coverage
    short = np.any(d[:, None] * r[None, :] < eta_j - COVER_EPS, axis=0)
    r[short] += 1
    return r


def plan_optimal(
    sol: FluidSolution,
    weights: Sequence[float] | None = None,
    dmin: np.ndarray | Sequence[Sequence[float]] | None = None,
    *,
    q_max: int = 64,
    max_rounds: int = 64,
) -> ReplicaPlan:
    """Per-replica demand fixed on the longest interval, then replica counts.

    For each flow the candidates are ``d = max(dmin, eta[n*] / q)`` for
    ``q = 1..q_max`` plus ``d = dmin``, where ``n*`` is the longest interval.
    The candidate with the lowest weighted cost on ``n*`` wins (ties: lowest
    cost over the whole horizon, then fewer replicas).  If a server/interval
    capacity row is then violated, the flows on it move to the candidate
    that uses the least of the violated rows, for up to ``max_rounds`` rounds.
    """
    spec = sol.spec
    J, M = spec.num_allocations, spec.num_resources
    eta = sol.control.eta  # J x M x N
    tau = sol.control.durations
    N = tau.size
    w = np.ones(M) if weights is None else np.asarray(weights, float)
    dlb = np.asarray(spec.replica_demand_lb if dmin is None else dmin, float).reshape(J, M)
    nstar = int(np.argmax(tau))
    sj = spec.flow_server
    cap = np.asarray(spec.capacity, float)  # I x M

    candidates: list[list[tuple[np.ndarray, np.ndarray]]] = []
    for j in range(J):
        cands = []
        seen = set()
        top = eta[j, :, nstar]
        options = [np.maximum(dlb[j], top / q) for q in range(1, q_max + 1)] + [dlb[j].copy()]
        for d in options:
            if np.any(d <= 0):
                # a resource with zero fluid and zero floor: one unit keeps the replica meaningful
                d = np.where(d <= 0, 1.0, d)
            key = tuple(np.round(d, 12))
            if key in seen:
                continue
            seen.add(key)
            cands.append((d, _replicas_for(eta[j], d)))
        candidates.append(cands)

    def usage(d, r):
        return d[:, None] * r[None, :]  # M x N

    choice = []
    for j in range(J):
        def rank(c):
            d, r = c
            star = float(w @ d) * r[nstar] * tau[nstar]
            total = float(w @ d) * float(r @ tau)
            return (round(star, 9), round(total, 9), int(r.max(initial=0)))
        choice.append(min(range(len(candidates[j])), key=lambda a: rank(candidates[j][a])))

    for _ in range(max_rounds + 1):
        load = np.zeros((spec.num_servers, M, N))
        for j in range(J):
            d, r = candidates[j][choice[j]]
            load[sj[j]] += usage(d, r)
        over = load > cap[:, :, None] + 1e-9
        if not over.any():
            break
        changed = False
        for i in np.unique(np.nonzero(over)[0]):
            rows = over[i]  # M x N mask of violated rows on server i
            for j in np.flatnonzero(sj == i):
                best = min(
                    range(len(candidates[j])),
                    key=lambda a: (float(usage(*candidates[j][a])[rows].sum()), a),
                )
                if best != choice[j]:
                    choice[j] = best
                    changed = True
        if not changed:
            break
    load = np.zeros((spec.num_servers, M, N))
    for j in range(J):
        d, r = candidates[j][choice[j]]
        load[sj[j]] += usage(d, r)
    over = load > cap[:, :, None] + 1e-9
    if over.any():
        i, m, n = (int(v) for v in np.argwhere(over)[0])
        raise Unsatisfiable(
            f"server {i} resource {m} interval {n}: needs {load[i, m, n]:g} > capacity {cap[i, m]:g}",
            (i, n, m),
        )
    demand = np.stack([candidates[j][choice[j]][0] for j in range(J)])
    replicas = np.stack([candidates[j][choice[j]][1] for j in range(J)])
    return ReplicaPlan(sol.control.breakpoints.copy(), replicas, demand, w)


def plan_from_counts(spec: NetworkSpec, breakpoints: Sequence[float], replicas) -> ReplicaPlan:
    """Plan with one resource unit per replica from explicit counts."""
    r = np.asarray(replicas, dtype=np.int64)
    J, M = spec.num_allocations, spec.num_resources
    if r.shape[0] != J:
        raise ValueError("one row of replica counts per allocation required")
    return ReplicaPlan(np.asarray(breakpoints, float), r, np.ones((J, M)), np.ones(M))


def fluid_usage(sol: FluidSolution) -> float:
    """Resource-time used by the fluid allocation itself (weights 1)."""
    return float(np.einsum("jmn,n->", sol.control.eta, sol.control.durations))


__all__ = [
    "PlanningError",
    "ReplicaPlan",
    "Unsatisfiable",
    "fluid_usage",
    "plan_ceiling",
    "plan_from_counts",
    "plan_optimal",
]
