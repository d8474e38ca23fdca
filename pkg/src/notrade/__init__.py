"""Consumption-investment with an illiquid asset under proportional costs."""

from .model import ModelParams, merton_baseline, scenario, validate
from .hjbgrid import Grid
from .solver import BR, NT, SR, Solution, SolveOptions, solve
from .policy import PolicyField, Position, Region

__all__ = [
    "BR", "NT", "SR", "Grid", "ModelParams", "PolicyField", "Position", "Region",
    "Solution", "SolveOptions", "merton_baseline", "scenario", "solve", "validate",
]
__version__ = "0.1.0"
