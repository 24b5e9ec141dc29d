"""Fluid optimal-control problem on a uniform time grid.

Controls are constant on each grid interval, so integrating the buffer
dynamics over an interval is exact and the buffer is linear inside it.
Non-negativity and timeout caps at the grid points therefore hold on the
whole horizon, and the trapezoid rule gives the exact holding integral.
The discretized program is the continuous problem restricted to controls
that switch only on the grid.

``solve_fluid`` runs two LPs.  The first minimizes the holding integral.
The second keeps that optimum and breaks ties between alternative optima:
it minimizes the integral of the largest weighted buffer in each
independent group of servers and spreads unused capacity onto the flows.
Without it, the simplex vertex for symmetric networks tends to starve all
but one function, which is optimal for the fluid but a poor replica
schedule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import lp
from .model import ControlTrajectory, BufferTrajectory, NetworkSpec, evaluate_buffers, validate

log = logging.getLogger(__name__)

MAX_VARIABLES = 2_000_000
MERGE_TOL = 1e-6
SPARE_CAPACITY_WEIGHT = 1e-3


class FluidProgramError(Exception):
    pass


class InfeasibleProgram(FluidProgramError):
    """The discretized program has no feasible point.

    ``rows`` holds labels such as ``("timeout", k, n)`` for the violated rows.
    """

    def __init__(self, message: str, rows=()):
        super().__init__(message)
        self.rows = tuple(rows)


class UnboundedProgram(FluidProgramError):
    pass


@dataclass(eq=False)
class FluidProgram:
    spec: NetworkSpec
    n_steps: int
    grid: np.ndarray
    problem: lp.LpProblem
    u_index: np.ndarray  # J x N
    eta_index: dict[tuple[int, int, int], np.ndarray]  # (j, m, l) -> N
    x_index: np.ndarray  # K x N, buffer at grid points 1..N
    row_labels: list[tuple]
    objective_offset: float
    crash_basis: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def rows_with(self, kind: str) -> list[int]:
        return [r for r, lab in enumerate(self.row_labels) if lab[0] == kind]


@dataclass(eq=False)
class FluidSolution:
    spec: NetworkSpec
    control: ControlTrajectory
    buffers: BufferTrajectory
    objective: float
    grid: np.ndarray | None = None
    grid_eta: np.ndarray | None = None  # J x M x n_steps, before merging
    grid_u: np.ndarray | None = None
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "breakpoints": self.control.breakpoints.tolist(),
            "eta": self.control.eta.tolist(),
            "u": self.control.u.tolist(),
            "objective": self.objective,
        }

    @classmethod
    def from_dict(cls, spec: NetworkSpec, doc: dict) -> "FluidSolution":
        ctrl = ControlTrajectory(np.array(doc["breakpoints"]), np.array(doc["eta"]), np.array(doc["u"]))
        return cls(spec, ctrl, evaluate_buffers(spec, ctrl), float(doc["objective"]))


def discretize(spec: NetworkSpec, n_steps: int = 100, *, max_variables: int = MAX_VARIABLES) -> FluidProgram:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    problems = validate(spec)
    if problems:
        raise ValueError("invalid spec: " + "; ".join(v.message for v in problems))

    K, I, J, M = spec.num_functions, spec.num_servers, spec.num_allocations, spec.num_resources
    N = int(n_steps)
    n_seg = sum(len(spec.rate_segments[j][m]) for j in range(J) for m in range(M))
    n_vars = N * (J + n_seg + K)
    if n_vars > max_variables:
        raise ValueError(f"discretized program needs {n_vars} variables, limit is {max_variables}")

    P = spec.routing_matrix()
    lam = np.asarray(spec.arrival_rate, float)
    alpha = np.asarray(spec.initial_load, float)
    cost = np.asarray(spec.holding_cost, float)
    fj, sj = spec.flow_function, spec.flow_server
    taus = spec.timeout
    for k, tau in enumerate(taus):
        if tau is not None and np.any(P[:, k] > 0):
            raise ValueError(f"function {k} has a timeout and endogenous inflow; split its buffer first")

    grid = np.linspace(0.0, spec.horizon, N + 1)
    dt = spec.horizon / N

    # variable layout: u, then eta segments, then x
    nxt = 0
    u_index = np.arange(J * N).reshape(J, N)
    nxt += J * N
    eta_index: dict[tuple[int, int, int], np.ndarray] = {}
    lower: list[np.ndarray] = [np.zeros(J * N)]
    upper: list[np.ndarray] = [np.full(J * N, np.inf)]
    for j in range(J):
        for m in range(M):
            need = spec.control_lower_bound[j] if m == 0 else 0.0
            for l, seg in enumerate(spec.rate_segments[j][m]):
                eta_index[j, m, l] = np.arange(nxt, nxt + N)
                nxt += N
                lb = min(need, seg.width)
                need -= lb
                lower.append(np.full(N, lb))
                upper.append(np.full(N, seg.width))
    x_index = np.arange(nxt, nxt + K * N).reshape(K, N)
    nxt += K * N
    x_hi = np.array([np.inf if t is None else lam[k] * t for k, t in enumerate(taus)])
    lower.append(np.zeros(K * N))
    upper.append(np.repeat(x_hi, N))
    lo = np.concatenate(lower)
    hi = np.concatenate(upper)

    rows, cols, vals = [], [], []
    rhs: list[float] = []
    senses: list[str] = []
    labels: list[tuple] = []
    r = 0
    # net[k, j]: change of buffer k per unit of flow j
    net = P.T.copy()
    net[fj, np.arange(J)] -= 1.0
    for k in range(K):
        flows = np.flatnonzero(net[k] != 0)
        for n in range(N):
            rows.append(r); cols.append(x_index[k, n]); vals.append(1.0)
            if n > 0:
                rows.append(r); cols.append(x_index[k, n - 1]); vals.append(-1.0)
            for j in flows:
                rows.append(r); cols.append(u_index[j, n]); vals.append(-dt * net[k, j])
            rhs.append(dt * lam[k] + (alpha[k] if n == 0 else 0.0))
            senses.append("=")
            labels.append(("dynamics", k, n))
            r += 1
    for j in range(J):
        for m in range(M):
            segs = spec.rate_segments[j][m]
            for n in range(N):
                rows.append(r); cols.append(u_index[j, n]); vals.append(1.0)
                for l, seg in enumerate(segs):
                    rows.append(r); cols.append(eta_index[j, m, l][n]); vals.append(-seg.slope)
                rhs.append(0.0)
                senses.append("<=")
                labels.append(("rate", j, m, n))
                r += 1
    for i in range(I):
        flows = np.flatnonzero(sj == i)
        for m in range(M):
            for n in range(N):
                for j in flows:
                    for l in range(len(spec.rate_segments[j][m])):
                        rows.append(r); cols.append(eta_index[j, m, l][n]); vals.append(1.0)
                rhs.append(spec.capacity[i][m])
                senses.append("<=")
                labels.append(("capacity", i, m, n))
                r += 1

    A = sp.csr_matrix((vals, (rows, cols)), shape=(r, nxt))
    c = np.zeros(nxt)
    w = np.full(N, dt)
    w[-1] = dt / 2
    c[x_index] = cost[:, None] * w[None, :]
    offset = float(cost @ alpha) * dt / 2
    problem = lp.LpProblem.build(c, A, senses, rhs, lo, hi)

    # start from "no service": buffers basic in their dynamics rows, logicals elsewhere
    crash = np.full(nxt + r, lp.AT_LOWER, dtype=np.int8)
    crash[x_index.ravel()] = lp.BASIC
    dyn = np.array([lab[0] == "dynamics" for lab in labels])
    crash[nxt + np.flatnonzero(~dyn)] = lp.BASIC
    crash[nxt + np.flatnonzero(dyn)] = lp.AT_LOWER
    return FluidProgram(spec, N, grid, problem, u_index, eta_index, x_index, labels, offset, crash)


def _initial_timeout_violations(spec: NetworkSpec) -> list[tuple]:
    bad = []
    for k, tau in enumerate(spec.timeout):
        if tau is not None and spec.initial_load[k] > spec.arrival_rate[k] * tau + 1e-12:
            bad.append(("timeout", k, 0))
    return bad


def _raise_for(sol: lp.LpSolution, prog: FluidProgram):
    if sol.status is lp.LpStatus.INFEASIBLE:
        labels = [prog.row_labels[i] for i in sol.infeasible_rows if i < len(prog.row_labels)]
        raise InfeasibleProgram(f"fluid program infeasible ({len(labels)} rows violated)", labels)
    if sol.status is lp.LpStatus.UNBOUNDED:
        raise UnboundedProgram("fluid program unbounded")
    raise FluidProgramError(f"LP solver stopped: {sol.status.value}")


def _refine(prog: FluidProgram, first: lp.LpSolution, lp_opts: dict) -> lp.LpSolution:
    """Second LP: hold the holding integral at its optimum per group, then
    minimize the integral of each group's largest weighted buffer minus a
    small reward for allocated resources."""
    spec = prog.spec
    base = prog.problem
    m0, n0 = base.shape
    N, dt = prog.n_steps, prog.dt
    cost = np.asarray(spec.holding_cost, float)
    groups = [fs for fs, _ in spec.components() if fs]
    G = len(groups)

    z_index = n0 + np.arange(G * N).reshape(G, N)
    n1 = n0 + G * N
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    group_rows = []
    xval = first.x
    z_row_choice = np.empty((G, N), dtype=int)
    for g, fs in enumerate(groups):
        for n in range(N):
            best, best_val = None, -np.inf
            for k in fs:
                rows += [r, r]; cols += [prog.x_index[k, n], z_index[g, n]]; vals += [cost[k], -1.0]
                rhs.append(0.0)
                v = cost[k] * xval[prog.x_index[k, n]]
                if v > best_val:
                    best, best_val = r, v
                r += 1
            z_row_choice[g, n] = best
    # group objective caps
    var_group = np.full(n0, -1)
    for g, fs in enumerate(groups):
        var_group[prog.x_index[fs].ravel()] = g
    for g in range(G):
        mask = np.flatnonzero((var_group == g) & (base.c != 0))
        cap = float(base.c[mask] @ xval[mask])
        rows += [r] * mask.size; cols += list(mask); vals += list(base.c[mask])
        rhs.append(cap + 1e-9 * max(1.0, abs(cap)))
        group_rows.append(r)
        r += 1
    extra = sp.csr_matrix((vals, (rows, cols)), shape=(r, n1))
    A = sp.vstack([sp.hstack([base.A, sp.csr_matrix((m0, G * N))]), extra], format="csr")
    c = np.zeros(n1)
    c[z_index] = dt
    eta_cols = np.concatenate(list(prog.eta_index.values()))
    c[eta_cols] = -SPARE_CAPACITY_WEIGHT * dt
    problem = lp.LpProblem.build(
        c, A, list(base.senses) + ["<="] * r, np.concatenate([base.b, rhs]),
        np.concatenate([base.lower, np.zeros(G * N)]), np.concatenate([base.upper, np.full(G * N, np.inf)]),
    )
    # warm start: first-stage basis, each z basic in the row of its largest buffer
    basis = np.concatenate([
        first.basis[:n0],
        np.full(G * N, lp.BASIC, dtype=np.int8),
        first.basis[n0:],
        np.full(r, lp.BASIC, dtype=np.int8),
    ])
    basis[n1 + m0 + z_row_choice.ravel()] = lp.AT_LOWER
    return lp.solve(problem, basis=basis, **lp_opts)


def solve_fluid(prog: FluidProgram, *, refine: bool = True, **lp_opts) -> FluidSolution:
    """Solve ``prog`` and return merged piecewise-constant controls.

    Raises :class:`InfeasibleProgram` (with violated row labels) or
    :class:`UnboundedProgram`.
    """
    spec = prog.spec
    bad = _initial_timeout_violations(spec)
    if bad:
        raise InfeasibleProgram("initial load already exceeds a timeout cap", bad)
    first = lp.solve(prog.problem, basis=prog.crash_basis, **lp_opts)
    if not first.optimal:
        _raise_for(first, prog)
    sol = first
    iterations = first.iterations
    if refine:
        second = _refine(prog, first, lp_opts)
        if second.optimal:
            sol = second
            iterations += second.iterations
        else:
            log.warning("tie-breaking stage ended with %s; keeping first-stage solution", second.status.value)
    x = sol.x
    J, K, M, N = spec.num_allocations, spec.num_functions, spec.num_resources, prog.n_steps
    u = np.maximum(x[prog.u_index], 0.0)
    eta = np.zeros((J, M, N))
    for (j, m, _l), idx in prog.eta_index.items():
        eta[j, m] += x[idx]
    eta = np.maximum(eta, 0.0)
    lp_buffers = np.concatenate([np.asarray(spec.initial_load, float)[:, None], x[prog.x_index]], axis=1)

    ctrl = _merge(prog.grid, eta, u)
    buffers = evaluate_buffers(spec, ctrl)
    keep = np.searchsorted(prog.grid, ctrl.breakpoints)
    ref = lp_buffers[:, keep]
    scale = max(1.0, float(np.max(np.abs(lp_buffers))))
    err = float(np.max(np.abs(buffers.values - ref)))
    if err > 1e-6 * scale:
        raise FluidProgramError(f"buffer reconstruction differs from LP by {err:.3g}")
    objective = buffers.integral(spec.holding_cost)
    return FluidSolution(spec, ctrl, buffers, objective, prog.grid, eta, u, iterations)


def _merge(grid: np.ndarray, eta: np.ndarray, u: np.ndarray, tol: float = MERGE_TOL) -> ControlTrajectory:
    N = grid.size - 1
    dt = np.diff(grid)
    starts = [0]
    for n in range(1, N):
        s = starts[-1]
        if np.max(np.abs(eta[..., n] - eta[..., s]), initial=0.0) <= tol and np.max(np.abs(u[:, n] - u[:, s]), initial=0.0) <= tol:
            continue
        starts.append(n)
    bounds = starts + [N]
    e_out, u_out = [], []
    for a, b in zip(bounds[:-1], bounds[1:]):
        w = dt[a:b] / dt[a:b].sum()
        # duration-weighted means keep the served integral exact
        e_out.append(eta[..., a:b] @ w)
        u_out.append(u[:, a:b] @ w)
    return ControlTrajectory(grid[bounds], np.stack(e_out, axis=-1), np.stack(u_out, axis=-1))


def solve_spec(spec: NetworkSpec, n_steps: int = 100, **kw) -> FluidSolution:
    return solve_fluid(discretize(spec, n_steps), **kw)


def max_feasible_horizon(
    spec: NetworkSpec, n_steps: int = 100, tol: float = 1e-2, **kw
) -> tuple[float, FluidSolution | None]:
    """Largest horizon in ``[0, spec.horizon]`` (to within ``tol``) whose
    discretized program is feasible, with the solution at that horizon."""
    from dataclasses import replace

    if _initial_timeout_violations(spec):
        return 0.0, None

    def attempt(T):
        try:
            return solve_fluid(discretize(replace(spec, horizon=T), n_steps), **kw)
        except InfeasibleProgram:
            return None

    full = attempt(spec.horizon)
    if full is not None:
        return spec.horizon, full
    lo, hi, best = 0.0, spec.horizon, None
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        sol = attempt(mid)
        if sol is None:
            hi = mid
        else:
            lo, best = mid, sol
    if best is None:
        return 0.0, None
    return lo, best
