from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluidscale.fluid import (
    FluidSolution,
    InfeasibleProgram,
    discretize,
    max_feasible_horizon,
    solve_fluid,
    solve_spec,
)
from fluidscale.model import build_crisscross, build_unique_allocation, evaluate_buffers
from oracles import drain_objective
from test_model import single_buffer


@pytest.mark.parametrize("n", [1, 2, 3, 4, 7, 16, 100])
def test_drain_matches_grid_oracle(n):
    sol = solve_spec(single_buffer(), n)
    assert sol.objective == pytest.approx(drain_objective(10.0, 5.0, 4.0, n), rel=1e-9)


def test_drain_merges_to_two_intervals():
    sol = solve_spec(single_buffer(), 100)
    ctrl = sol.control
    assert ctrl.num_intervals == 2
    np.testing.assert_allclose(ctrl.breakpoints, [0.0, 2.0, 4.0], atol=1e-9)
    np.testing.assert_allclose(ctrl.u[0], [5.0, 0.0], atol=1e-7)
    assert sol.objective == pytest.approx(10.0, rel=1e-9)


def test_empty_system_costs_nothing():
    sol = solve_spec(single_buffer(alpha=0.0), 10)
    assert sol.objective == pytest.approx(0.0, abs=1e-9)


def test_balanced_load_holds_buffer_level():
    # lambda equals the full service capacity: the buffer cannot move
    spec = single_buffer(alpha=3.0, lam=5.0, mu=1.0, width=5.0, T=2.0)
    sol = solve_spec(spec, 20)
    np.testing.assert_allclose(sol.buffers.values[0], 3.0, atol=1e-7)
    assert sol.objective == pytest.approx(6.0, rel=1e-9)


def test_crisscross_capacity_row_couples_flows_one_and_two():
    prog = discretize(build_crisscross(), 5)
    A = prog.problem.A.tocsr()
    for r in prog.rows_with("capacity"):
        label = prog.row_labels[r]
        cols = set(A.indices[A.indptr[r]:A.indptr[r + 1]])
        flows = {j for (j, m, l), idx in prog.eta_index.items() if set(idx.tolist()) & cols}
        assert flows == ({0, 1} if label[1] == 0 else {2})


def test_timeout_below_initial_load_is_infeasible():
    spec = replace(single_buffer(alpha=10.0, lam=2.0), timeout=(1.0,))
    with pytest.raises(InfeasibleProgram) as info:
        solve_spec(spec, 10)
    assert ("timeout", 0, 0) in info.value.rows
    assert max_feasible_horizon(spec, 10) == (0.0, None)


def test_horizon_kept_when_timeout_never_binds():
    spec = replace(single_buffer(alpha=1.0, lam=1.0), timeout=(100.0,))
    T, sol = max_feasible_horizon(spec, 20)
    assert T == spec.horizon
    assert sol is not None


def test_timeout_sweep_point_truncates_horizon():
    spec = build_unique_allocation(num_servers=1, server_capacity=125.0, timeout=5.0)
    T, sol = max_feasible_horizon(spec, 50, tol=0.05)
    assert 0.0 < T < spec.horizon
    cap = np.array(spec.arrival_rate) * 5.0
    assert np.all(sol.buffers.values <= cap[:, None] + 1e-6)
    # just past T the program is infeasible
    with pytest.raises(InfeasibleProgram):
        solve_spec(replace(spec, horizon=min(spec.horizon, T + 0.2)), 50)


def test_timeout_on_fed_function_is_rejected():
    spec = replace(build_crisscross(), timeout=(None, None, 5.0))
    with pytest.raises(ValueError):
        discretize(spec, 10)


def test_variable_guard():
    with pytest.raises(ValueError):
        discretize(build_unique_allocation(), 100, max_variables=1000)


def test_base_network_uses_all_capacity_evenly():
    spec = build_unique_allocation(num_servers=2)
    sol = solve_spec(spec, 50)
    eta = sol.control.eta[:, 0, :]
    np.testing.assert_allclose(eta, 50.0, atol=1e-6)
    # each buffer drains at 105 - 100 = 5 per unit time
    np.testing.assert_allclose(sol.buffers.at(10.0), 50.0, atol=1e-6)
    assert sol.objective == pytest.approx(2 * 5 * 750.0, rel=1e-9)


def test_solution_json_round_trip():
    sol = solve_spec(build_crisscross(), 20)
    again = FluidSolution.from_dict(sol.spec, sol.to_dict())
    np.testing.assert_allclose(again.buffers.values, sol.buffers.values)
    assert again.objective == sol.objective


def _crisscross_family():
    return st.builds(
        lambda lam, mu2, alpha, b2: build_crisscross(lambda1=lam, lambda2=lam, mu2=mu2, alpha=alpha, b2=b2),
        st.floats(0.5, 8.0),
        st.floats(0.5, 2.0),
        st.floats(0.0, 40.0),
        st.floats(4.0, 16.0),
    )


@settings(max_examples=15, deadline=None)
@given(_crisscross_family())
def test_fluid_solution_invariants(spec):
    sol = solve_spec(spec, 20)
    ctrl = sol.control
    assert ctrl.num_intervals <= 20
    assert sol.buffers.values.min() >= -1e-7
    # at least one resource unit per flow everywhere
    assert ctrl.eta.sum(axis=1).min() >= 1 - 1e-9
    # server capacity
    for i, cap in enumerate(spec.capacity):
        load = ctrl.eta[spec.flow_server == i].sum(axis=(0, 1))
        assert load.max() <= cap[0] + 1e-7
    # buffers agree with an independent re-integration, objective with its trapezoid
    again = evaluate_buffers(spec, ctrl)
    np.testing.assert_allclose(again.values, sol.buffers.values, atol=1e-9)
    assert again.integral(spec.holding_cost) == pytest.approx(sol.objective, rel=1e-6, abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.floats(1.0, 50.0), st.floats(0.5, 3.0), st.floats(1.0, 10.0), st.integers(2, 40))
def test_refinement_never_hurts_on_drains(alpha, mu, T, n):
    spec = single_buffer(alpha=alpha, mu=mu, T=T)
    coarse = solve_spec(spec, n).objective
    fine = solve_spec(spec, 2 * n).objective
    assert fine <= coarse * (1 + 1e-6) + 1e-9


def test_warm_path_gives_same_objective_without_refinement():
    prog = discretize(build_crisscross(), 30)
    a = solve_fluid(prog, refine=False)
    b = solve_fluid(prog)
    assert a.objective == pytest.approx(b.objective, rel=1e-7)
