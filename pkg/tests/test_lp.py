import io
import time

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from fluidscale.lp import AT_LOWER, BASIC, LpProblem, LpStatus, dump, solve
from oracles import enumerate_lp, random_lp


def test_random_lps_match_vertex_enumeration():
    rng = np.random.default_rng(2024)
    counts = {}
    for _ in range(200):
        c, A, senses, b, upper = random_lp(rng)
        status, obj = enumerate_lp(c, A, senses, b, upper)
        sol = solve(LpProblem.build(c, A, senses, b, upper=upper))
        counts[status] = counts.get(status, 0) + 1
        assert sol.status.value == status
        if status == "optimal":
            assert sol.objective == pytest.approx(obj, abs=1e-6)
    # the generator must exercise all three outcomes
    assert set(counts) == {"optimal", "infeasible", "unbounded"}


def test_textbook_maximization():
    # max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18  ->  36 at (2, 6)
    sol = solve(LpProblem.build([-3, -5], [[1, 0], [0, 2], [3, 2]], ["<="] * 3, [4, 12, 18]))
    assert sol.status is LpStatus.OPTIMAL
    assert sol.objective == pytest.approx(-36)
    np.testing.assert_allclose(sol.x, [2, 6], atol=1e-9)


def test_infeasible_reports_rows():
    sol = solve(LpProblem.build([1, 1], [[1, 1], [1, 1]], ["<=", ">="], [1, 3]))
    assert sol.status is LpStatus.INFEASIBLE
    assert sol.infeasible_rows
    assert set(sol.infeasible_rows) <= {0, 1}


def test_unbounded_has_improving_ray():
    p = LpProblem.build([-1, 0], [[1, -1]], ["<="], [1])
    sol = solve(p)
    assert sol.status is LpStatus.UNBOUNDED
    if sol.ray is not None:
        assert p.c @ sol.ray < 0
        assert np.all(sol.ray >= -1e-12)


def test_strong_duality_on_optimal_problems():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 60:
        c, A, senses, b, upper = random_lp(rng)
        sol = solve(LpProblem.build(c, A, senses, b, upper=upper))
        if not sol.optimal:
            continue
        checked += 1
        assert sol.dual_objective == pytest.approx(sol.objective, abs=1e-7)
        y = sol.duals
        for i, s in enumerate(senses):
            # sign conventions of a minimization: y <= 0 on <=, y >= 0 on >=
            if s == "<=":
                assert y[i] <= 1e-9
            elif s == ">=":
                assert y[i] >= -1e-9


def test_row_scaling_leaves_solution_unchanged():
    rng = np.random.default_rng(5)
    done = 0
    while done < 30:
        c, A, senses, b, upper = random_lp(rng)
        base = solve(LpProblem.build(c, A, senses, b, upper=upper))
        if not base.optimal:
            continue
        done += 1
        scale = 10.0 ** rng.uniform(-3, 3, len(b))
        scaled = solve(LpProblem.build(c, A * scale[:, None], senses, b * scale, upper=upper))
        assert scaled.status is LpStatus.OPTIMAL
        assert scaled.objective == pytest.approx(base.objective, abs=1e-6)


def test_warm_start_from_optimal_basis_needs_no_pivots():
    rng = np.random.default_rng(9)
    done = 0
    while done < 30:
        c, A, senses, b, upper = random_lp(rng)
        p = LpProblem.build(c, A, senses, b, upper=upper)
        first = solve(p)
        if not first.optimal:
            continue
        done += 1
        again = solve(p, basis=first.basis)
        assert again.iterations == 0
        assert again.objective == pytest.approx(first.objective, abs=1e-9)


def test_bounds_and_equalities():
    # x in [1, 3], y in [-2, 2], x + y = 2: x - y = 2x - 2 is smallest at x = 1
    p = LpProblem.build([1, -1], [[1, 1]], ["="], [2], lower=[1, -2], upper=[3, 2])
    sol = solve(p)
    assert sol.objective == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(sol.x, [1, 1], atol=1e-9)
    assert p.residuals(sol.x).max() <= 1e-9


def test_decomposed_blocks_agree_with_joint_solve():
    blocks = [
        ([-1, -1], [[1, 2], [3, 1]], ["<=", "<="], [4, 6]),
        ([2, 1], [[1, 1]], [">="], [3]),
    ]
    c = np.concatenate([blk[0] for blk in blocks])
    A = sp.block_diag([np.array(blk[1], float) for blk in blocks]).toarray()
    senses = [s for blk in blocks for s in blk[2]]
    b = np.concatenate([blk[3] for blk in blocks])
    p = LpProblem.build(c, A, senses, b)
    joint = solve(p, decompose=False)
    split = solve(p, decompose=True)
    assert joint.objective == pytest.approx(split.objective, abs=1e-9)
    parts = sum(solve(LpProblem.build(*blk)).objective for blk in blocks)
    assert split.objective == pytest.approx(parts, abs=1e-9)


def test_infeasible_block_dominates_unbounded_block():
    # block 1: x0 <= -1 with x0 >= 0; block 2: min -x1 with x1 - x2 <= 1
    A = sp.block_diag([np.array([[1.0]]), np.array([[1.0, -1.0]])]).toarray()
    p = LpProblem.build([0, -1, 0], A, ["<=", "<="], [-1, 1])
    sol = solve(p)
    assert sol.status is LpStatus.INFEASIBLE


def test_iteration_limit_is_reported():
    p = LpProblem.build([-3, -5], [[1, 0], [0, 2], [3, 2]], ["<="] * 3, [4, 12, 18])
    assert solve(p, max_iters=0).status is LpStatus.ITERATION_LIMIT


def test_empty_problem_and_unconstrained_bounds():
    p = LpProblem.build([1, -1], np.zeros((0, 2)), [], [], upper=[5, 5])
    sol = solve(p)
    assert sol.optimal
    assert sol.objective == pytest.approx(-5)


def test_build_rejects_bad_input():
    with pytest.raises(ValueError):
        LpProblem.build([1], [[1]], ["<"], [1])
    with pytest.raises(ValueError):
        LpProblem.build([1, 2], [[1]], ["<="], [1])
    with pytest.raises(ValueError):
        LpProblem.build([1], [[1]], ["<="], [1], lower=[2], upper=[1])


def test_dump_writes_every_row():
    p = LpProblem.build([1, 2], [[1, 1], [1, -1]], ["<=", ">="], [3, 0])
    text = dump(p, io.StringIO())
    assert text.count("\n") >= 3


def test_basis_statuses_are_valid():
    sol = solve(LpProblem.build([-1, -1], [[1, 2], [3, 1]], ["<=", "<="], [4, 6]))
    assert np.count_nonzero(sol.basis == BASIC) == 2
    assert set(np.unique(sol.basis)) <= {0, 1, 2, 3}
    assert AT_LOWER in sol.basis


def test_degenerate_cycling_example_terminates():
    # Beale's example cycles under naive Dantzig pricing
    c = [-0.75, 150, -0.02, 6]
    A = [[0.25, -60, -0.04, 9], [0.5, -90, -0.02, 3], [0, 0, 1, 0]]
    sol = solve(LpProblem.build(c, A, ["<="] * 3, [0, 0, 1]))
    assert sol.status is LpStatus.OPTIMAL
    assert sol.objective == pytest.approx(-0.05)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_solution_is_primal_feasible(seed):
    c, A, senses, b, upper = random_lp(np.random.default_rng(seed))
    p = LpProblem.build(c, A, senses, b, upper=upper)
    sol = solve(p)
    if sol.optimal:
        assert p.residuals(sol.x).max() <= 1e-7
        assert np.all(sol.x >= -1e-9) and np.all(sol.x <= upper + 1e-9)
        assert c @ sol.x == pytest.approx(sol.objective, abs=1e-9)


def test_solver_speed_on_oracle_batch():
    rng = np.random.default_rng(1)
    problems = [LpProblem.build(*random_lp(rng)[:4], upper=None) for _ in range(100)]
    t0 = time.perf_counter()
    for p in problems:
        solve(p)
    assert time.perf_counter() - t0 < 10
