"""Dense-interface linear programming via a bounded-variable revised simplex.

Problems are stated as::

    minimize    c @ x
    subject to  A[i] @ x  (<= | = | >=)  b[i]
                lower <= x <= upper

Every row gets a logical variable ``s_i`` so that ``A x + s = b`` with
``s_i`` in ``[0, inf)`` for ``<=`` rows, ``(-inf, 0]`` for ``>=`` rows and
``[0, 0]`` for equalities.  Phase 1 minimizes the sum of bound
infeasibilities of the basic variables (a composite method, so any starting
basis works and no artificial columns are needed); phase 2 runs on the
original costs once the basis is primal feasible.

The basis inverse is kept as a sparse LU of the basis matrix followed by a
product-form eta file, refactorized every ``refactor_every`` updates.
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

__all__ = [
    "BASIC",
    "AT_LOWER",
    "AT_UPPER",
    "AT_ZERO",
    "LpProblem",
    "LpSolution",
    "LpStatus",
    "dump",
    "solve",
]

# per-variable basis status codes
BASIC, AT_LOWER, AT_UPPER, AT_ZERO = 0, 1, 2, 3

_SENSES = {"<=": "<=", "L": "<=", "=": "=", "==": "=", "E": "=", ">=": ">=", "G": ">="}
_PIVOT_TOL = 1e-9


class LpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


@dataclass(frozen=True, eq=False)
class LpProblem:
    """A minimization LP.  Use :meth:`build` to construct from loose inputs."""

    c: np.ndarray
    A: sp.csr_matrix
    senses: tuple[str, ...]
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def build(
        cls,
        c: Sequence[float],
        A,
        senses: Sequence[str],
        b: Sequence[float],
        lower: Sequence[float] | float | None = None,
        upper: Sequence[float] | float | None = None,
    ) -> "LpProblem":
        c = np.asarray(c, dtype=float).ravel()
        n = c.size
        A = sp.csr_matrix(A, dtype=float) if not sp.issparse(A) else A.tocsr().astype(float)
        if A.shape[0] == 0:
            A = sp.csr_matrix((0, n))
        b = np.asarray(b, dtype=float).ravel()
        m = b.size
        if A.shape != (m, n):
            raise ValueError(f"constraint matrix is {A.shape}, expected {(m, n)}")
        try:
            senses = tuple(_SENSES[s] for s in senses)
        except KeyError as exc:
            raise ValueError(f"unknown constraint sense {exc.args[0]!r}") from None
        if len(senses) != m:
            raise ValueError("one sense per row required")
        if not np.all(np.isfinite(b)):
            raise ValueError("right-hand sides must be finite")
        lower = np.zeros(n) if lower is None else np.broadcast_to(np.asarray(lower, float), (n,)).copy()
        upper = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, float), (n,)).copy()
        if np.any(lower > upper):
            raise ValueError("lower bound exceeds upper bound")
        if np.any(lower == np.inf) or np.any(upper == -np.inf):
            raise ValueError("bounds must admit a finite value")
        A.sum_duplicates()
        A.eliminate_zeros()
        return cls(c, A, senses, b, lower, upper)

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    def residuals(self, x: np.ndarray) -> np.ndarray:
        """Per-row constraint violation (0 when satisfied)."""
        ax = self.A @ x
        viol = np.zeros(len(self.b))
        for i, s in enumerate(self.senses):
            if s == "<=":
                viol[i] = max(0.0, ax[i] - self.b[i])
            elif s == ">=":
                viol[i] = max(0.0, self.b[i] - ax[i])
            else:
                viol[i] = abs(ax[i] - self.b[i])
        return viol


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray
    objective: float
    iterations: int
    basis: np.ndarray | None = None
    duals: np.ndarray | None = None
    dual_objective: float | None = None
    infeasible_rows: tuple[int, ...] = ()
    message: str = ""
    ray: np.ndarray | None = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def solve(
    problem: LpProblem,
    *,
    feas_tol: float = 1e-7,
    opt_tol: float = 1e-9,
    max_iters: int = 200_000,
    basis: np.ndarray | None = None,
    decompose: bool = True,
    refactor_every: int = 100,
    stall_threshold: int = 50,
) -> LpSolution:
    """Solve ``problem`` with the revised simplex method.

    ``basis`` is a status vector over structural then logical variables
    (``BASIC``/``AT_LOWER``/``AT_UPPER``/``AT_ZERO``) as returned in
    :attr:`LpSolution.basis`; it is used as the starting point when it is
    well formed and nonsingular.  With ``decompose`` the problem is split
    into independent blocks (connected components of the row/column
    incidence graph) and byte-identical blocks are solved once.
    """
    m, n = problem.shape
    opts = dict(
        feas_tol=feas_tol,
        opt_tol=opt_tol,
        max_iters=max_iters,
        refactor_every=refactor_every,
        stall_threshold=stall_threshold,
    )
    if basis is not None:
        basis = np.asarray(basis, dtype=np.int8)
        if basis.shape != (n + m,):
            basis = None

    if not decompose or m == 0:
        return _solve_block(problem, basis, opts)

    graph = sp.bmat([[None, problem.A], [problem.A.T, None]], format="csr")
    ncomp, labels = connected_components(graph, directed=False)
    if ncomp == 1:
        return _solve_block(problem, basis, opts)

    row_lab, col_lab = labels[:m], labels[m:]
    x = np.zeros(n)
    duals = np.zeros(m)
    status_out = np.zeros(n + m, dtype=np.int8)
    iterations = 0
    dual_obj = 0.0
    bad_rows: list[int] = []
    memo: dict[bytes, LpSolution] = {}
    failures: list[tuple[LpSolution, np.ndarray]] = []
    A_csr = problem.A
    for comp in range(ncomp):
        rows = np.flatnonzero(row_lab == comp)
        cols = np.flatnonzero(col_lab == comp)
        sub = LpProblem(
            problem.c[cols],
            A_csr[rows][:, cols].tocsr(),
            tuple(problem.senses[i] for i in rows),
            problem.b[rows],
            problem.lower[cols],
            problem.upper[cols],
        )
        sub_basis = None
        if basis is not None:
            sub_basis = np.concatenate([basis[cols], basis[n + rows]])
        key = _block_key(sub, sub_basis)
        sol = memo.get(key)
        if sol is None:
            sol = _solve_block(sub, sub_basis, opts)
            memo[key] = sol
            iterations += sol.iterations
        if sol.status is not LpStatus.OPTIMAL:
            if sol.status is LpStatus.INFEASIBLE:
                bad_rows.extend(int(rows[i]) for i in sol.infeasible_rows)
            failures.append((sol, cols))
            continue
        x[cols] = sol.x
        duals[rows] = sol.duals
        status_out[cols] = sol.basis[: len(cols)]
        status_out[n + rows] = sol.basis[len(cols):]
        dual_obj += sol.dual_objective
    if failures:
        # an infeasible block makes the whole problem infeasible; unboundedness needs the rest solved
        rank = {LpStatus.INFEASIBLE: 0, LpStatus.ITERATION_LIMIT: 1, LpStatus.UNBOUNDED: 2}
        sol, cols = min(failures, key=lambda f: rank[f[0].status])
        if sol.status is LpStatus.INFEASIBLE:
            return LpSolution(
                LpStatus.INFEASIBLE, x, np.nan, iterations,
                infeasible_rows=tuple(sorted(bad_rows)), message=sol.message,
            )
        ray = None
        if sol.ray is not None:
            ray = np.zeros(n)
            ray[cols] = sol.ray
        return LpSolution(sol.status, x, np.nan, iterations, message=sol.message, ray=ray)
    return LpSolution(
        LpStatus.OPTIMAL, x, float(problem.c @ x), iterations,
        basis=status_out, duals=duals, dual_objective=dual_obj,
    )


def _block_key(p: LpProblem, basis: np.ndarray | None) -> bytes:
    h = hashlib.sha1()
    A = p.A.tocsr()
    A.sort_indices()
    for arr in (p.c, p.b, p.lower, p.upper, A.data, A.indices, A.indptr):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update("".join(p.senses).encode())
    if basis is not None:
        h.update(basis.tobytes())
    return h.digest()


def _solve_block(problem: LpProblem, basis, opts) -> LpSolution:
    m, n = problem.shape
    if m == 0:
        return _solve_unconstrained(problem)
    if n == 0:
        bad = tuple(
            i for i, (s, v) in enumerate(zip(problem.senses, problem.b))
            if (s == "<=" and v < -opts["feas_tol"]) or (s == ">=" and v > opts["feas_tol"])
            or (s == "=" and abs(v) > opts["feas_tol"])
        )
        if bad:
            return LpSolution(LpStatus.INFEASIBLE, np.zeros(0), np.nan, 0, infeasible_rows=bad,
                              message="empty row with unsatisfiable right-hand side")
        return LpSolution(LpStatus.OPTIMAL, np.zeros(0), 0.0, 0, basis=np.zeros(m, dtype=np.int8),
                          duals=np.zeros(m), dual_objective=0.0)
    scale = np.abs(problem.A).max(axis=1).toarray().ravel()
    scale[scale == 0] = 1.0
    D = sp.diags(1.0 / scale)
    A = (D @ problem.A).tocsc()
    b = problem.b / scale
    core = _RevisedSimplex(problem.c, A, b, problem.senses, problem.lower, problem.upper, opts, basis)
    status = core.run()
    x = core.x[:n].copy()
    if status is LpStatus.OPTIMAL:
        y = core.y / scale
        # dual objective of the bounded problem: b'y plus bound terms of nonbasic columns
        d = problem.c - problem.A.T @ y
        nb = core.status[:n]
        bound_term = np.where(nb == AT_LOWER, problem.lower, np.where(nb == AT_UPPER, problem.upper, 0.0))
        bound_term = np.where(nb == BASIC, 0.0, bound_term)
        dual_obj = float(problem.b @ y + np.sum(np.where(nb == BASIC, 0.0, d * bound_term)))
        return LpSolution(
            status, x, float(problem.c @ x), core.iterations,
            basis=core.status.copy(), duals=y, dual_objective=dual_obj,
        )
    if status is LpStatus.INFEASIBLE:
        return LpSolution(
            status, x, np.nan, core.iterations,
            infeasible_rows=core.infeasible_rows(), message="phase 1 optimum has positive infeasibility",
        )
    if status is LpStatus.UNBOUNDED:
        return LpSolution(status, x, -np.inf, core.iterations, message="unbounded ray found", ray=core.ray)
    return LpSolution(status, x, np.nan, core.iterations, message="iteration limit reached")


def _solve_unconstrained(problem: LpProblem) -> LpSolution:
    c, lo, hi = problem.c, problem.lower, problem.upper
    x = np.where(c > 0, lo, np.where(c < 0, hi, np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))))
    if not np.all(np.isfinite(x)):
        ray = np.where(np.isfinite(x), 0.0, -np.sign(c))
        return LpSolution(LpStatus.UNBOUNDED, np.nan_to_num(x), -np.inf, 0, message="unbounded variable", ray=ray)
    status = np.where(x == lo, AT_LOWER, np.where(x == hi, AT_UPPER, AT_ZERO)).astype(np.int8)
    obj = float(c @ x)
    return LpSolution(LpStatus.OPTIMAL, x, obj, 0, basis=status, duals=np.zeros(0), dual_objective=obj)


class _RevisedSimplex:
    def __init__(self, c, A, b, senses, lower, upper, opts, basis):
        m, n = A.shape
        self.m, self.n = m, n
        self.A = sp.hstack([A, sp.identity(m, format="csc")], format="csc")
        self.AT = self.A.T.tocsr()
        self.b = b
        self.c = np.concatenate([c, np.zeros(m)])
        slo = np.array([0.0 if s != ">=" else -np.inf for s in senses])
        shi = np.array([0.0 if s != "<=" else np.inf for s in senses])
        self.lo = np.concatenate([lower, slo])
        self.hi = np.concatenate([upper, shi])
        self.movable = self.lo < self.hi
        self.feas_tol = opts["feas_tol"]
        self.opt_tol = opts["opt_tol"]
        self.max_iters = opts["max_iters"]
        self.refactor_every = opts["refactor_every"]
        self.stall_threshold = opts["stall_threshold"]
        self.iterations = 0
        self.y = np.zeros(m)
        self.ray = None
        if basis is None or not self._load_basis(basis):
            self._slack_basis()

    # -- basis setup ---------------------------------------------------

    def _nonbasic_value(self, j, st):
        if st == AT_LOWER:
            return self.lo[j]
        if st == AT_UPPER:
            return self.hi[j]
        return 0.0

    def _default_status(self):
        lo, hi = self.lo, self.hi
        return np.where(np.isfinite(lo), AT_LOWER, np.where(np.isfinite(hi), AT_UPPER, AT_ZERO)).astype(np.int8)

    def _slack_basis(self):
        self.status = self._default_status()
        self.head = np.arange(self.n, self.n + self.m)
        self.status[self.head] = BASIC
        self._set_nonbasic_values()
        self._factor()

    def _load_basis(self, basis) -> bool:
        status = basis.astype(np.int8).copy()
        head = np.flatnonzero(status == BASIC)
        if head.size != self.m:
            return False
        default = self._default_status()
        # repair statuses that point at infinite bounds
        bad_lo = (status == AT_LOWER) & ~np.isfinite(self.lo)
        bad_hi = (status == AT_UPPER) & ~np.isfinite(self.hi)
        bad_zero = (status == AT_ZERO) & (np.isfinite(self.lo) | np.isfinite(self.hi))
        fix = bad_lo | bad_hi | bad_zero
        status[fix] = default[fix]
        self.status = status
        self.head = head
        self._set_nonbasic_values()
        try:
            self._factor()
        except RuntimeError:
            return False
        return True

    def _set_nonbasic_values(self):
        st = self.status
        self.x = np.where(st == AT_LOWER, self.lo, np.where(st == AT_UPPER, self.hi, 0.0))
        self.x[st == BASIC] = 0.0

    def _factor(self):
        B = self.A[:, self.head].tocsc()
        lu = splu(B, permc_spec="COLAMD")
        if not np.all(np.isfinite(lu.U.diagonal())) or np.min(np.abs(lu.U.diagonal())) < 1e-13:
            raise RuntimeError("singular basis")
        self.lu = lu
        self.etas: list[tuple[int, np.ndarray, np.ndarray, float]] = []
        self._recompute_basic_values()

    def _recompute_basic_values(self):
        xn = self.x.copy()
        xn[self.head] = 0.0
        rhs = self.b - self.A @ xn
        self.x[self.head] = self._ftran(rhs)

    # -- linear algebra with the eta file -----------------------------

    def _ftran(self, a):
        z = self.lu.solve(a)
        for r, idx, vals, piv in self.etas:
            zr = z[r] / piv
            if zr != 0.0:
                z[idx] -= zr * vals
            z[r] = zr
        return z

    def _btran(self, cb):
        c = cb.copy()
        for r, idx, vals, piv in reversed(self.etas):
            dot = c[idx] @ vals
            c[r] = (c[r] - (dot - piv * c[r])) / piv
        return self.lu.solve(c, trans="T")

    def _column(self, q):
        col = np.zeros(self.m)
        s, e = self.A.indptr[q], self.A.indptr[q + 1]
        col[self.A.indices[s:e]] = self.A.data[s:e]
        return col

    # -- main loop -----------------------------------------------------

    def _refactor(self):
        before = self.x[self.head].copy()
        try:
            self._factor()
        except RuntimeError:
            # fall back to an all-logical basis; phase 1 recovers feasibility
            self._slack_basis()
            return
        drift = np.max(np.abs(before - self.x[self.head])) if before.size else 0.0
        if drift > 1e-6 * (1.0 + np.max(np.abs(before), initial=0.0)):
            self.refactor_every = max(10, self.refactor_every // 2)

    def run(self) -> LpStatus:
        degenerate = 0
        bland = False
        tol = self.feas_tol
        while True:
            head = self.head
            xb = self.x[head]
            lob, hib = self.lo[head], self.hi[head]
            below = xb < lob - tol
            above = xb > hib + tol
            phase1 = bool(below.any() or above.any())
            if phase1:
                cb = above.astype(float) - below.astype(float)
                cost = np.zeros(self.n + self.m)
            else:
                cb = self.c[head]
                cost = self.c
            y = self._btran(cb)
            d = cost - self.AT @ y
            st = self.status
            eligible = self.movable & (
                ((st == AT_LOWER) & (d < -self.opt_tol))
                | ((st == AT_UPPER) & (d > self.opt_tol))
                | ((st == AT_ZERO) & (np.abs(d) > self.opt_tol))
            )
            cand = np.flatnonzero(eligible)
            if cand.size == 0:
                if self.etas:
                    self._refactor()
                    continue
                self.y = y
                return LpStatus.INFEASIBLE if phase1 else LpStatus.OPTIMAL
            if self.iterations >= self.max_iters:
                return LpStatus.ITERATION_LIMIT
            q = int(cand[0]) if bland else int(cand[np.argmax(np.abs(d[cand]))])
            sigma = 1.0 if d[q] < 0 else -1.0

            alpha = self._ftran(self._column(q))
            delta = -sigma * alpha
            ratio = np.full(self.m, np.inf)
            leave_at = np.zeros(self.m, dtype=np.int8)
            feas = ~(below | above)
            dec = delta < -_PIVOT_TOL
            inc = delta > _PIVOT_TOL
            with np.errstate(divide="ignore", invalid="ignore"):
                m1 = feas & dec & np.isfinite(lob)
                ratio[m1] = (xb[m1] - lob[m1]) / -delta[m1]
                leave_at[m1] = AT_LOWER
                m2 = feas & inc & np.isfinite(hib)
                ratio[m2] = (hib[m2] - xb[m2]) / delta[m2]
                leave_at[m2] = AT_UPPER
                m3 = below & inc
                ratio[m3] = (lob[m3] - xb[m3]) / delta[m3]
                leave_at[m3] = AT_LOWER
                m4 = above & dec
                ratio[m4] = (xb[m4] - hib[m4]) / -delta[m4]
                leave_at[m4] = AT_UPPER
            np.maximum(ratio, 0.0, out=ratio)
            flip = self.hi[q] - self.lo[q]
            theta_row = ratio.min() if self.m else np.inf
            if not np.isfinite(theta_row) and not np.isfinite(flip):
                if phase1:
                    # numerically inconsistent phase-1 direction; refresh and retry
                    if self.etas:
                        self._refactor()
                        continue
                    return LpStatus.INFEASIBLE
                ray = np.zeros(self.n + self.m)
                ray[q] = sigma
                ray[head] = delta
                self.ray = ray[: self.n]
                return LpStatus.UNBOUNDED

            self.iterations += 1
            if flip <= theta_row:
                theta = flip
                self.x[head] += theta * delta
                if st[q] == AT_LOWER:
                    st[q] = AT_UPPER
                    self.x[q] = self.hi[q]
                else:
                    st[q] = AT_LOWER
                    self.x[q] = self.lo[q]
            else:
                theta = theta_row
                ties = np.flatnonzero(ratio <= theta + 1e-12 * (1.0 + theta))
                if bland:
                    r = int(ties[np.argmin(head[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(alpha[ties]))])
                leaving = int(head[r])
                self.x[head] += theta * delta
                self.x[q] += sigma * theta
                st[leaving] = leave_at[r]
                self.x[leaving] = self.lo[leaving] if leave_at[r] == AT_LOWER else self.hi[leaving]
                st[q] = BASIC
                head[r] = q
                idx = np.flatnonzero(np.abs(alpha) > 1e-14)
                self.etas.append((r, idx, alpha[idx], alpha[r]))
                if len(self.etas) >= self.refactor_every:
                    self._refactor()

            if theta <= 1e-12:
                degenerate += 1
                if degenerate > self.stall_threshold:
                    bland = True
            else:
                degenerate = 0
                bland = False

    def infeasible_rows(self) -> tuple[int, ...]:
        xb = self.x[self.head]
        bad = (xb < self.lo[self.head] - self.feas_tol) | (xb > self.hi[self.head] + self.feas_tol)
        rows = set()
        for pos in np.flatnonzero(bad):
            j = int(self.head[pos])
            if j >= self.n:
                rows.add(j - self.n)
            else:
                s, e = self.A.indptr[j], self.A.indptr[j + 1]
                rows.update(int(i) for i in self.A.indices[s:e])
        return tuple(sorted(rows))


def dump(problem: LpProblem, stream: io.TextIOBase | None = None) -> str:
    """Plain-text listing of ``problem``, one row per line (debugging aid)."""
    out = io.StringIO()
    out.write("min " + " ".join(f"{v:+.6f}" for v in problem.c) + "\n")
    A = problem.A.tocsr()
    for i in range(A.shape[0]):
        s, e = A.indptr[i], A.indptr[i + 1]
        terms = " ".join(f"{A.data[k]:+.6f}*x{A.indices[k]}" for k in range(s, e))
        out.write(f"r{i}: {terms} {problem.senses[i]} {problem.b[i]:.6f}\n")
    for j, (lo, hi) in enumerate(zip(problem.lower, problem.upper)):
        if lo != 0.0 or np.isfinite(hi):
            out.write(f"b{j}: {lo:.6f} <= x{j} <= {hi:.6f}\n")
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text
