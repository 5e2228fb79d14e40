"""Radial network model, DistFlow power flow and derived metrics."""

from .lindistflow import LinDistFlow, lindistflow
from .network import DG, NetworkError, RadialNetwork, builtin_network, load_network, parse_network
from .powerflow import (
    BatchSolution,
    ConsistencyError,
    Injection,
    PowerFlowSolution,
    actual_injection,
    distflow_residuals,
    energy_purchase,
    injections,
    max_violation,
    nominal_injection,
    solve_batch,
    solve_power_flow,
    violation_batch,
)

__all__ = [
    "DG", "NetworkError", "RadialNetwork", "builtin_network", "load_network", "parse_network",
    "LinDistFlow", "lindistflow",
    "BatchSolution", "ConsistencyError", "Injection", "PowerFlowSolution", "actual_injection",
    "distflow_residuals", "energy_purchase", "injections", "max_violation", "nominal_injection",
    "solve_batch", "solve_power_flow", "violation_batch",
]
