"""Euler-Maruyama integration of the energy-based reduction SDE.

This exists only to check the closed form pathwise: the reference integrator
is driven by the innovation increments of a closed-form trajectory, so both
describe the same realisation and their energy paths can be compared step by
step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .closedform import (
    ContractError,
    TimeGrid,
    conditional_moments,
    conditional_probabilities,
    innovation_path,
    sample_terminal_energy,
    signal_from_increments,
)
from .model import SpectralModel, reduction_timescale
from .streams import brownian_increments, path_stream


@dataclass(frozen=True, eq=False)
class ReferenceTrajectory:
    """Amplitudes have shape (..., len(grid), n_levels).

    ``norm_drift`` holds |norm^2 - 1| of each step before renormalisation.
    """

    grid: TimeGrid
    amplitudes: np.ndarray
    h: np.ndarray
    v: np.ndarray
    norm_drift: np.ndarray


def _energy_stats(amps, energies):
    p = np.abs(amps) ** 2
    p = p / p.sum(axis=-1, keepdims=True)
    h, v, _ = conditional_moments(p, energies)
    return h, v


def euler_step(amps, model: SpectralModel, sigma: float, dt: float, dw, renormalize: bool = True):
    """One explicit step; ``amps`` may carry leading batch axes matching ``dw``."""
    if not dt > 0:
        raise ContractError("dt must be positive")
    amps = np.asarray(amps, dtype=complex)
    e = model.energies
    h, _ = _energy_stats(amps, e)
    dev = e - np.asarray(h)[..., None]
    dw = np.asarray(dw, dtype=float)[..., None]
    out = amps * (1.0 + (-1j * e - 0.125 * sigma**2 * dev**2) * dt + 0.5 * sigma * dev * dw)
    if renormalize:
        out = out / np.sqrt(np.sum(np.abs(out) ** 2, axis=-1, keepdims=True))
    return out


def integrate_reference(
    model: SpectralModel,
    sigma: float,
    grid: TimeGrid,
    w_increments,
    renormalize: bool = True,
) -> ReferenceTrajectory:
    """Iterate :func:`euler_step` from the model's initial state.

    ``w_increments`` has shape (n_steps,) or (batch, n_steps).  With
    ``renormalize=False`` the state is left to drift off the unit sphere,
    which is only useful as a diagnostic.
    """
    dw = np.asarray(w_increments, dtype=float)
    if dw.shape[-1] != grid.n_steps:
        raise ContractError(
            f"got {dw.shape[-1]} increments for a grid of {grid.n_steps} steps"
        )
    batch = dw.shape[:-1]
    n = model.n_levels
    dts = np.diff(grid.times)
    amps = np.empty(batch + (len(grid), n), dtype=complex)
    amps[..., 0, :] = np.broadcast_to(model.initial_amplitudes(), batch + (n,))
    drift = np.empty(batch + (grid.n_steps,))
    for k in range(grid.n_steps):
        nxt = euler_step(amps[..., k, :], model, sigma, dts[k], dw[..., k], renormalize=False)
        norm2 = np.sum(np.abs(nxt) ** 2, axis=-1)
        prev = np.sum(np.abs(amps[..., k, :]) ** 2, axis=-1)
        drift[..., k] = np.abs(norm2 / prev - 1.0)
        if renormalize:
            nxt = nxt / np.sqrt(norm2)[..., None]
        amps[..., k + 1, :] = nxt
    h, v = _energy_stats(amps, model.energies)
    return ReferenceTrajectory(grid=grid, amplitudes=amps, h=h, v=v, norm_drift=drift)


@dataclass
class ValidationLevel:
    dt: float
    n_steps: int
    max_error: np.ndarray  # per seed: sup over the path of |H_ref - H_closed|
    agreement: np.ndarray  # per seed: same most-likely level at t_max

    @property
    def strong_error(self) -> float:
        """Monte Carlo estimate of E[sup_t |H_ref - H_closed|]."""
        return float(self.max_error.mean())

    def to_dict(self) -> dict:
        return {
            "dt": self.dt,
            "n_steps": self.n_steps,
            "strong_error": self.strong_error,
            "strong_error_se": float(self.max_error.std(ddof=1) / np.sqrt(self.max_error.size))
            if self.max_error.size > 1
            else None,
            "worst_error": float(self.max_error.max()),
            "median_error": float(np.median(self.max_error)),
            "agreement_fraction": float(self.agreement.mean()),
        }


@dataclass
class ValidationReport:
    """Closed form vs reference integrator across grid refinements."""

    seeds: list
    t_max: float
    levels: list = field(default_factory=list)

    @property
    def error_table(self) -> np.ndarray:
        """Per-seed sup errors, shape (n_levels, n_seeds)."""
        return np.array([lv.max_error for lv in self.levels])

    @property
    def strong_errors(self) -> np.ndarray:
        return np.array([lv.strong_error for lv in self.levels])

    @property
    def monotone(self) -> bool:
        """Strong error strictly decreases with each refinement."""
        return bool(np.all(np.diff(self.strong_errors) < 0))

    @property
    def per_seed_monotone_fraction(self) -> float:
        return float(np.mean(np.all(np.diff(self.error_table, axis=0) < 0, axis=0)))

    def fraction_within(self, tol: float) -> np.ndarray:
        """Per level, fraction of seeds whose sup error is below ``tol``."""
        return (self.error_table < tol).mean(axis=1)

    def to_dict(self) -> dict:
        return {
            "t_max": self.t_max,
            "n_seeds": len(self.seeds),
            "levels": [lv.to_dict() for lv in self.levels],
            "monotone_decrease": self.monotone,
            "per_seed_monotone_fraction": self.per_seed_monotone_fraction,
        }


def closed_form_on_grid(model: SpectralModel, sigma: float, xi: np.ndarray, grid: TimeGrid):
    """Posterior, energy and innovation for signal paths already on ``grid``."""
    pi_t = conditional_probabilities(model, sigma, xi, grid.times)
    h, v, _ = conditional_moments(pi_t, model.energies)
    w = innovation_path(xi, h, sigma, grid)
    return pi_t, h, v, w


def validate_against_closed_form(
    model: SpectralModel,
    sigma: float,
    t_max: float,
    coarse_steps: int,
    levels: int = 3,
    factor: int = 2,
    seeds=range(200),
    renormalize: bool = True,
) -> ValidationReport:
    """Refinement sweep on shared Brownian paths.

    For each seed the closed-form trajectory is generated once on the finest
    grid (``coarse_steps * factor**(levels-1)`` steps).  Every level is driven
    by the subsampled innovation path of that trajectory, so all levels see
    the same realisation of the driving Brownian motion, and is compared with
    the closed-form energy at its own grid times.
    """
    if levels < 2:
        raise ValueError("need at least two refinement levels")
    if factor < 2:
        raise ValueError("refinement factor must be at least 2")
    seeds = [int(s) for s in seeds]
    fine_steps = coarse_steps * factor ** (levels - 1)
    fine = TimeGrid.uniform(t_max, fine_steps)
    xi_fine = np.empty((len(seeds), len(fine)))
    for row, seed in enumerate(seeds):
        rng = path_stream(seed, 0)
        j = sample_terminal_energy(model, rng)
        db = brownian_increments(rng, fine_steps, fine.dt)
        xi_fine[row] = signal_from_increments(j, model, sigma, fine.times, db)
    pi_fine, h_fine, _, w_fine = closed_form_on_grid(model, sigma, xi_fine, fine)

    report = ValidationReport(seeds=seeds, t_max=float(t_max))
    for level in range(levels):
        stride = factor ** (levels - 1 - level)
        grid = TimeGrid(fine.times[::stride])
        ref = integrate_reference(
            model, sigma, grid, np.diff(w_fine[:, ::stride], axis=-1), renormalize
        )
        err = np.max(np.abs(ref.h - h_fine[:, ::stride]), axis=-1)
        ref_final = np.abs(ref.amplitudes[:, -1, :]) ** 2
        agree = np.argmax(ref_final, axis=-1) == np.argmax(pi_fine[:, -1, :], axis=-1)
        report.levels.append(ValidationLevel(grid.dt, grid.n_steps, err, agree))
    return report


def default_validation_grid(model: SpectralModel, sigma: float, steps_per_tau: int = 250,
                            horizon_tau: float = 5.0):
    """(t_max, coarse_steps) spanning ``horizon_tau`` reduction times."""
    tau = reduction_timescale(model, sigma)
    if math.isinf(tau):
        tau = 1.0
    return horizon_tau * tau, int(round(steps_per_tau * horizon_tau))
