"""Spectral description of the system under simulation.

Everything downstream works in the energy eigenbasis: a system is a list of
distinct energy levels, the probability of reducing to each (the squared norm
of the initial state's projection onto that eigenspace) and the phase of that
projection.  Units are hbar = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_MAX_STEPS = 10**7


class InvalidModelError(ValueError):
    """Raised when a level list cannot describe a normalisable state."""


@dataclass(frozen=True)
class LevelInput:
    energy: float
    amplitude: complex = 1.0


def _readonly(a) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SpectralModel:
    """Distinct energy levels with their reduction probabilities.

    Attributes:
        energies: strictly increasing energy eigenvalues.
        probabilities: probability of reducing to each level; sums to one.
        phases: unit-modulus phase of the initial projection onto each level.
    """

    energies: np.ndarray
    probabilities: np.ndarray
    phases: np.ndarray = field(default=None)

    def __post_init__(self):
        energies = np.asarray(self.energies, dtype=float).ravel()
        probs = np.asarray(self.probabilities, dtype=float).ravel()
        if self.phases is None:
            phases = np.ones_like(energies, dtype=complex)
        else:
            phases = np.asarray(self.phases, dtype=complex).ravel()
        if energies.size == 0:
            raise InvalidModelError("model needs at least one level")
        if not (energies.size == probs.size == phases.size):
            raise InvalidModelError("energies, probabilities and phases differ in length")
        if not np.all(np.isfinite(energies)):
            raise InvalidModelError("energies must be finite")
        if np.any(np.diff(energies) <= 0):
            raise InvalidModelError("energies must be strictly increasing")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise InvalidModelError("probabilities must be finite and non-negative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise InvalidModelError(f"probabilities sum to {probs.sum()!r}, not 1")
        if np.any(np.abs(np.abs(phases) - 1.0) > 1e-12):
            raise InvalidModelError("phases must have unit modulus")
        object.__setattr__(self, "energies", _readonly(energies))
        object.__setattr__(self, "probabilities", _readonly(probs))
        object.__setattr__(self, "phases", _readonly(phases))

    @property
    def n_levels(self) -> int:
        return int(self.energies.size)

    def initial_amplitudes(self) -> np.ndarray:
        return self.phases * np.sqrt(self.probabilities)

    def __eq__(self, other):
        if not isinstance(other, SpectralModel):
            return NotImplemented
        return (
            np.array_equal(self.energies, other.energies)
            and np.array_equal(self.probabilities, other.probabilities)
            and np.array_equal(self.phases, other.phases)
        )

    def __repr__(self):
        return (
            f"SpectralModel(energies={self.energies.tolist()}, "
            f"probabilities={self.probabilities.tolist()})"
        )


@dataclass(frozen=True)
class ReductionParams:
    """Coupling, time grid and classification threshold for a run.

    ``sigma = 0`` is accepted and gives plain Schrodinger evolution.
    """

    sigma: float
    t_max: float
    dt: float
    reduction_epsilon: float = 1e-4
    seed: int = 0
    max_steps: int = DEFAULT_MAX_STEPS

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError(f"sigma must be a finite non-negative number, got {self.sigma!r}")
        if not (math.isfinite(self.t_max) and self.t_max > 0):
            raise ValueError(f"t_max must be positive, got {self.t_max!r}")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if self.dt >= self.t_max:
            raise ValueError("dt must be smaller than t_max")
        if not 0 < self.reduction_epsilon < 1:
            raise ValueError("reduction_epsilon must lie in (0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        ratio = self.t_max / self.dt
        if ratio > self.max_steps:
            raise ValueError(
                f"t_max/dt = {ratio:.6g} exceeds the step cap of {self.max_steps}"
            )
        if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
            raise ValueError(
                f"t_max ({self.t_max!r}) must be an integer multiple of dt ({self.dt!r})"
            )

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))


def _as_level(item) -> LevelInput:
    if isinstance(item, LevelInput):
        return item
    energy, amplitude = item
    return LevelInput(float(energy), complex(amplitude))


def build_spectral_model(
    levels: Iterable[LevelInput | tuple], merge_tol: float | None = None
) -> SpectralModel:
    """Project an initial state onto the distinct energy eigenspaces.

    Levels whose energies lie within ``merge_tol`` of their neighbour (chained)
    are merged into one Luders level.  Its probability is the summed squared
    modulus of the merged amplitudes; its energy is the mean of the merged
    energies; its phase is that of the largest merged amplitude.  Levels that
    end up with zero probability are dropped since no trajectory can reach them.
    """
    items = [_as_level(x) for x in levels]
    if not items:
        raise InvalidModelError("empty level list")
    energies = np.array([x.energy for x in items], dtype=float)
    amps = np.array([x.amplitude for x in items], dtype=complex)
    if not np.all(np.isfinite(energies)) or not np.all(np.isfinite(amps)):
        raise InvalidModelError("energies and amplitudes must be finite")
    weights = np.abs(amps) ** 2
    total = weights.sum()
    if not total > 0:
        raise InvalidModelError("all amplitudes are zero")
    if merge_tol is None:
        merge_tol = 1e-12 * float(np.max(np.abs(energies)))
    if merge_tol < 0:
        raise InvalidModelError("merge_tol must be non-negative")

    # full lexicographic sort so the result does not depend on input order
    order = np.lexsort((amps.imag, amps.real, energies))
    energies, amps, weights = energies[order], amps[order], weights[order]

    groups: list[list[int]] = [[0]]
    for k in range(1, energies.size):
        if energies[k] - energies[k - 1] <= merge_tol:
            groups[-1].append(k)
        else:
            groups.append([k])

    out_e, out_p, out_ph = [], [], []
    for g in groups:
        w = float(np.sum(weights[g]))
        if w == 0.0:
            continue
        lead = g[int(np.argmax(weights[g]))]
        out_e.append(float(np.mean(energies[g])))
        out_p.append(w / total)
        out_ph.append(amps[lead] / abs(amps[lead]))

    probs = np.array(out_p)
    probs /= probs.sum()
    return SpectralModel(np.array(out_e), probs, np.array(out_ph))


def initial_moments(model: SpectralModel) -> tuple[float, float, float]:
    """Mean, variance and third central moment of the energy at t = 0."""
    e, p = model.energies, model.probabilities
    h0 = float(np.dot(p, e))
    dev = e - h0
    return h0, float(np.dot(p, dev**2)), float(np.dot(p, dev**3))


def reduction_timescale(model: SpectralModel, sigma: float) -> float:
    """Characteristic collapse time 1/(sigma^2 V0).

    Returns ``math.inf`` for an eigenstate or for ``sigma == 0``; nothing
    reduces in either case.
    """
    _, v0, _ = initial_moments(model)
    rate = sigma**2 * v0
    if model.n_levels == 1 or rate <= 0.0:
        return math.inf
    return 1.0 / rate


def two_state_rate(model: SpectralModel, sigma: float) -> float:
    """Two-level reduction rate sigma^2 (E2 - E1)^2 / 4."""
    if model.n_levels != 2:
        raise InvalidModelError(f"two-state model required, got {model.n_levels} levels")
    omega = float(model.energies[1] - model.energies[0])
    return 0.25 * sigma**2 * omega**2


def model_from_pairs(pairs: Sequence[tuple[float, complex]], **kw) -> SpectralModel:
    return build_spectral_model([LevelInput(float(e), complex(c)) for e, c in pairs], **kw)
