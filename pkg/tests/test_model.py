from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluidscale.model import (
    Allocation,
    ControlTrajectory,
    NetworkSpec,
    Segment,
    build_crisscross,
    build_heterogeneous,
    build_unique_allocation,
    departed_mass,
    evaluate_buffers,
    validate,
)


def single_buffer(alpha=10.0, lam=0.0, mu=1.0, width=5.0, T=4.0, eta_min=0.0):
    return NetworkSpec(
        num_functions=1,
        num_servers=1,
        allocations=(Allocation(0, 0),),
        routing=((0.0,),),
        arrival_rate=(lam,),
        initial_load=(alpha,),
        rate_segments=(((Segment(mu, width),),),),
        capacity=((width,),),
        holding_cost=(1.0,),
        timeout=(None,),
        concurrency_cap=(1,),
        replica_demand_lb=((1.0,),),
        control_lower_bound=(eta_min,),
        horizon=T,
    )


def codes(spec):
    return {v.code for v in validate(spec)}


def test_crisscross_is_valid_and_shaped():
    spec = build_crisscross()
    assert validate(spec) == []
    assert (spec.num_functions, spec.num_servers, spec.num_allocations) == (3, 2, 3)
    assert spec.arrival_rate[2] == 0.0
    assert spec.routing[1][2] == 1.0
    assert spec.control_lower_bound == (1.0, 1.0, 1.0)


def test_routing_mass_above_one_is_flagged():
    spec = build_crisscross()
    spec = replace(spec, routing=((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.7, 0.5, 0.0)))
    assert "routing_mass" in codes(spec)


def test_duplicate_function_server_pair_is_flagged():
    spec = build_crisscross()
    spec = replace(
        spec,
        allocations=spec.allocations + (Allocation(0, 0),),
        routing=spec.routing + ((0.0, 0.0, 0.0),),
        rate_segments=spec.rate_segments + (spec.rate_segments[0],),
        replica_demand_lb=spec.replica_demand_lb + ((1.0,),),
        control_lower_bound=spec.control_lower_bound + (1.0,),
    )
    assert "duplicate_allocation" in codes(spec)


@pytest.mark.parametrize(
    "change, code",
    [
        (dict(arrival_rate=(-1.0, 6.0, 0.0)), "negative_rate"),
        (dict(initial_load=(-1.0, 0.0, 0.0)), "negative_load"),
        (dict(holding_cost=(0.0, 1.0, 1.0)), "nonpositive_cost"),
        (dict(capacity=((0.0,), (8.0,))), "nonpositive_capacity"),
        (dict(horizon=0.0), "nonpositive_horizon"),
        (dict(timeout=(0.0, None, None)), "nonpositive_timeout"),
        (dict(concurrency_cap=(0, 1, 1)), "nonpositive_concurrency"),
        (dict(routing=((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 0.0))), "self_routing"),
        (dict(routing=((0.0, 0.0, 0.0), (0.0, -0.1, 1.0), (0.0, 0.0, 0.0))), "negative_probability"),
    ],
)
def test_invalid_fields_are_reported(change, code):
    assert code in codes(replace(build_crisscross(), **change))


def test_nonconcave_segments_are_flagged():
    spec = build_crisscross()
    segs = ((Segment(1.0, 4.0), Segment(2.0, 4.0)),)
    spec = replace(spec, rate_segments=(segs,) + spec.rate_segments[1:])
    assert "nonconcave" in codes(spec)


def test_bad_indices_are_flagged():
    spec = replace(build_crisscross(), allocations=(Allocation(0, 0), Allocation(1, 5), Allocation(2, 1)))
    assert "bad_index" in codes(spec)


def test_no_service_means_linear_growth():
    spec = build_crisscross(alpha=(3.0, 4.0, 5.0))
    ctrl = ControlTrajectory.constant([0.0, 0.0, 0.0], spec.horizon)
    bufs = evaluate_buffers(spec, ctrl)
    t = np.array([0.0, 2.5, 10.0])
    expected = np.array(spec.initial_load)[:, None] + np.array(spec.arrival_rate)[:, None] * t
    np.testing.assert_allclose(bufs.at(t), expected)


def test_drain_goes_negative_after_two():
    spec = single_buffer()
    bufs = evaluate_buffers(spec, ControlTrajectory.constant([5.0], 4.0))
    np.testing.assert_allclose(bufs.at([0, 1, 2, 4])[0], [10, 5, 0, -10])
    assert bufs.has_negative
    (lo, hi), = bufs.negative_regions()[0]
    assert lo == pytest.approx(2.0) and hi == pytest.approx(4.0)


def test_crisscross_routes_function_two_into_three():
    spec = build_crisscross(alpha=(0.0, 0.0, 0.0), lambda1=1.0, lambda2=1.0)
    c, u3 = 2.0, 0.5
    bufs = evaluate_buffers(spec, ControlTrajectory.constant([0.0, c, u3], spec.horizon))
    for t in (1.0, 4.0, 10.0):
        assert bufs.at(t)[2] == pytest.approx(c * t - u3 * t)


def test_unique_allocation_counts():
    spec = build_unique_allocation()
    assert (spec.num_functions, spec.num_servers) == (50, 10)
    assert validate(spec) == []
    assert build_unique_allocation(num_servers=100).num_functions == 500
    assert spec.service_rate(0) == pytest.approx(2.1)


def test_idle_single_queue_builder():
    spec = build_unique_allocation(num_servers=1, funcs_per_server=1, lambda_=0.0)
    assert spec.num_functions == 1 and spec.arrival_rate == (0.0,)


def test_heterogeneous_sampling():
    base = build_unique_allocation()
    assert build_heterogeneous(base, 0.0, seed=3) == base
    het = build_heterogeneous(base, 10.0, seed=3)
    lam = np.array(het.arrival_rate)
    assert np.all((lam >= 100.0) & (lam <= 121.0))
    mu = np.array([het.service_rate(j) for j in range(het.num_allocations)])
    assert np.all((mu >= 2.1 - 1e-12) & (mu <= 2.1 * 1.21 + 1e-12))
    assert build_heterogeneous(base, 10.0, seed=3) == het
    assert build_heterogeneous(base, 10.0, seed=4) != het
    assert validate(het) == []


def test_json_round_trip():
    spec = replace(build_crisscross(), timeout=(3.0, None, 2.0))
    again = NetworkSpec.from_json(spec.to_json())
    assert again == spec
    assert spec.to_dict()["version"] == "fluidscale-spec/1"


def test_components_group_linked_servers():
    assert len(build_crisscross().components()) == 1
    assert len(build_unique_allocation(num_servers=4).components()) == 4


def test_control_trajectory_rejects_bad_grids():
    with pytest.raises(ValueError):
        ControlTrajectory([0.0, 1.0, 1.0], np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        ControlTrajectory([0.0, 1.0], np.zeros((1, 1)), -np.ones((1, 1)))


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        evaluate_buffers(build_crisscross(), ControlTrajectory.constant([1.0], 10.0))


controls = st.integers(1, 6).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(0.05, 3.0), min_size=n, max_size=n),
        st.lists(st.lists(st.floats(0.0, 20.0), min_size=n, max_size=n), min_size=3, max_size=3),
    )
)


def _trajectory(widths, u, T=10.0):
    t = np.concatenate([[0.0], np.cumsum(widths)])
    t = t * (T / t[-1])
    u = np.asarray(u)
    return ControlTrajectory(t, u.copy(), u)


@settings(max_examples=60, deadline=None)
@given(controls, st.floats(0.0, 50.0), st.floats(0.0, 10.0))
def test_mass_is_conserved(ctrl_parts, alpha, lam):
    spec = build_crisscross(alpha=alpha, lambda1=max(lam, 0.1), lambda2=max(lam, 0.1))
    ctrl = _trajectory(*ctrl_parts)
    bufs = evaluate_buffers(spec, ctrl)
    t = ctrl.breakpoints
    inflow = sum(spec.initial_load) + sum(spec.arrival_rate) * t
    total = bufs.values.sum(axis=0) + departed_mass(spec, ctrl)
    np.testing.assert_allclose(total, inflow, rtol=1e-9, atol=1e-9 * max(1.0, inflow.max()))


@settings(max_examples=40, deadline=None)
@given(controls, controls)
def test_buffers_are_affine_in_controls(a_parts, b_parts):
    spec = build_crisscross()
    # put both controls on a common grid
    a, b = _trajectory(*a_parts), _trajectory(*b_parts)
    grid = np.union1d(a.breakpoints, b.breakpoints)
    grid = grid[np.concatenate([[True], np.diff(grid) > 1e-9])]
    grid[-1] = 10.0

    def on_grid(c):
        mids = 0.5 * (grid[:-1] + grid[1:])
        idx = np.searchsorted(c.breakpoints, mids, side="right") - 1
        return c.u[:, idx]

    ua, ub = on_grid(a), on_grid(b)
    x = lambda u: evaluate_buffers(spec, ControlTrajectory(grid, u, u)).values
    zero = x(np.zeros_like(ua))
    np.testing.assert_allclose(x(ua + ub) - x(ub), x(ua) - zero, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.floats(0.0, 20.0), st.integers(0, 1000))
def test_builders_produce_valid_specs(servers, per, spread, seed):
    base = build_unique_allocation(num_servers=servers, funcs_per_server=per)
    assert validate(base) == []
    assert validate(build_heterogeneous(base, spread, seed=seed)) == []
