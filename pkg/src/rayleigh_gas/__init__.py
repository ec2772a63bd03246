"""Simulation and validation toolkit for a tagged particle in an ideal
Rayleigh gas with annihilating obstacles, and for its linear Boltzmann
limit."""

from .core import (
    ANNIHILATED,
    Alive,
    InitialLaw,
    LocalizationPolicy,
    Mark,
    SimParams,
    ValidationError,
    derive_stream,
    validate,
)
from .limit import (
    collision_moments,
    ensemble_limit,
    series_mass,
    series_solution,
    simulate_limit,
    stationarity_check,
    survival_mass,
)
from .maxwellian import carleman_kernel, collision_rate, e_function, elastic_collide
from .micro import ensemble_micro, run_trajectory, run_trajectory_lazy, time_to_contact
from .pathology import classify, estimate_psi, psi_sweep

__all__ = [
    "ANNIHILATED", "Alive", "InitialLaw", "LocalizationPolicy", "Mark", "SimParams",
    "ValidationError", "derive_stream", "validate", "collision_moments", "ensemble_limit",
    "series_mass", "series_solution", "simulate_limit", "stationarity_check", "survival_mass",
    "carleman_kernel", "collision_rate", "e_function", "elastic_collide", "ensemble_micro",
    "run_trajectory", "run_trajectory_lazy", "time_to_contact", "classify", "estimate_psi",
    "psi_sweep",
]
