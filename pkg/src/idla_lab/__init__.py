"""Internal DLA with general sources: simulation, harmonic tools and fluctuation analysis."""

from .aggregation import IDLA, DivisibleSandpile, run_idla, smash_sum, stabilize_sandpile
from .analysis import ExponentFit, fit_exponent, measure_run
from .potential import PotentialKernel, exact_potential
from .sources import FlowSpec, discretize, example_flow, validate_flow

__all__ = [
    "IDLA",
    "DivisibleSandpile",
    "ExponentFit",
    "FlowSpec",
    "PotentialKernel",
    "discretize",
    "example_flow",
    "exact_potential",
    "fit_exponent",
    "measure_run",
    "run_idla",
    "smash_sum",
    "stabilize_sandpile",
    "validate_flow",
]

__version__ = "0.1.0"
