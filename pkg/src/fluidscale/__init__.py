"""Fluid-model replica scheduling for serverless function networks."""

from .fluid import FluidSolution, discretize, max_feasible_horizon, solve_fluid, solve_spec
from .harness import ExperimentConfig, run_experiment
from .lp import LpProblem, LpStatus, solve
from .model import (
    Allocation,
    NetworkSpec,
    Segment,
    build_crisscross,
    build_heterogeneous,
    build_unique_allocation,
    evaluate_buffers,
    validate,
)
from .planner import ReplicaPlan, plan_ceiling, plan_optimal
from .sim import Autoscaler, FluidSchedule, compute_metrics, run

__version__ = "0.1.0"

__all__ = [
    "Allocation",
    "Autoscaler",
    "ExperimentConfig",
    "FluidSchedule",
    "FluidSolution",
    "LpProblem",
    "LpStatus",
    "NetworkSpec",
    "ReplicaPlan",
    "Segment",
    "build_crisscross",
    "build_heterogeneous",
    "build_unique_allocation",
    "compute_metrics",
    "discretize",
    "evaluate_buffers",
    "max_feasible_horizon",
    "plan_ceiling",
    "plan_optimal",
    "run",
    "run_experiment",
    "solve",
    "solve_fluid",
    "solve_spec",
    "validate",
]
