"""Differentiable load scenarios for joint capacity and policy planning."""

from .diffusion import DiffusionScenarioGenerator
from .gridopt import InvestmentVector, load_case, sensitivities, solve_operations
from .planner import CoPlanner, PlanConfig, run
from .simkit import DayContext, LoadDataset, PolicyVector, SimNoiseSpec, generate_training_set, simulate_scenario

__all__ = [
    "DiffusionScenarioGenerator", "InvestmentVector", "load_case", "sensitivities", "solve_operations",
    "CoPlanner", "PlanConfig", "run", "DayContext", "LoadDataset", "PolicyVector", "SimNoiseSpec",
    "generate_training_set", "simulate_scenario",
]
__version__ = "0.1.0"
