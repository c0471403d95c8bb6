"""Closed-form simulation of energy-based quantum state reduction."""

from .closedform import (
    TimeGrid,
    TrajectoryPath,
    conditional_moments,
    conditional_probabilities,
    exponential_martingale,
    innovation_path,
    realized_energy_two_state,
    reduction_probability,
    sample_terminal_energy,
    simulate_signal,
    simulate_trajectory,
    state_vector,
)
from .ensemble import EnsembleConfig, EnsembleSummary, run_all_checks, run_ensemble
from .model import (
    LevelInput,
    ReductionParams,
    SpectralModel,
    build_spectral_model,
    initial_moments,
    reduction_timescale,
)
from .sde_reference import euler_step, integrate_reference, validate_against_closed_form

__version__ = "0.1.0"
