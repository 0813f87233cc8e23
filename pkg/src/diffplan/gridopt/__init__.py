"""Hourly DC dispatch over a small network and its implicit derivatives."""

from .case import NetworkCase, SingularNetworkError, bundled_case_path, compute_ptdf, load_case
from .dispatch import (
    CapacityGradient,
    DegenerateActiveSetWarning,
    DispatchSolution,
    InvestmentVector,
    SolverError,
    lp_structure,
    sensitivities,
    sensitivity_capacity,
    sensitivity_demand,
    solve_batch,
    solve_operations,
)

__all__ = [
    "NetworkCase", "SingularNetworkError", "bundled_case_path", "compute_ptdf", "load_case",
    "CapacityGradient", "DegenerateActiveSetWarning", "DispatchSolution", "InvestmentVector", "SolverError",
    "lp_structure", "sensitivities", "sensitivity_capacity", "sensitivity_demand", "solve_batch",
    "solve_operations",
]
