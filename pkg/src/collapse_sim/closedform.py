"""Closed-form generation of energy-based reduction trajectories.

A trajectory is driven by two independent state variables: the terminal
energy level ``j`` (drawn with the Born probabilities) and a Brownian path
``B``.  The signal ``xi_t = sigma E_j t + B_t`` then determines everything
else algebraically at each time: the Bayes posterior over levels, the energy
mean/variance/skewness, the state vector and the innovation process that
drives the equivalent nonlinear SDE.  No time stepping is involved beyond
sampling ``B`` on the grid.

All evaluators broadcast over leading axes of ``xi``/``t``; the level index is
always the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ReductionParams, SpectralModel
from .streams import brownian_increments, path_stream


class ContractError(ValueError):
    """Arrays passed between stages do not conform to each other."""


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ContractError("time grid must be strictly increasing from 0")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, t_max: float, n_steps: int) -> "TimeGrid":
        return cls(np.linspace(0.0, float(t_max), int(n_steps) + 1))

    @classmethod
    def from_params(cls, params: ReductionParams) -> "TimeGrid":
        return cls.uniform(params.t_max, params.n_steps)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> float:
        return float(self.times[-1] / self.n_steps)

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def index_of(self, t: float, rtol: float = 1e-9) -> int:
        """Grid index of time ``t``; it must sit on the grid."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps or abs(self.times[k] - t) > rtol * max(self.dt, abs(t)):
            raise ContractError(f"time {t!r} is not a grid point (dt={self.dt!r})")
        return k

    def __len__(self):
        return self.times.size


@dataclass(frozen=True, eq=False)
class TrajectoryPath:
    """One realisation sampled on ``grid``.

    ``pi_t`` has shape (len(grid), n_levels); ``amplitudes`` likewise (complex).
    ``reduced_level`` is -1 when no level passed the reduction threshold by
    ``t_max``, in which case ``reduction_time`` is NaN.
    """

    grid: TimeGrid
    sigma: float
    energies: np.ndarray
    terminal_index: int
    xi: np.ndarray
    w: np.ndarray
    pi_t: np.ndarray
    h: np.ndarray
    v: np.ndarray
    skew: np.ndarray
    amplitudes: np.ndarray
    reduced_level: int
    reduction_time: float

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def brownian(self) -> np.ndarray:
        """The driving Brownian path ``B_t = xi_t - sigma E_j t``."""
        return self.xi - self.sigma * self.energies[self.terminal_index] * self.times


def sample_terminal_energy(model: SpectralModel, rng: np.random.Generator) -> int:
    """Index of the terminal level; consumes exactly one uniform draw."""
    u = rng.random()
    j = int(np.searchsorted(np.cumsum(model.probabilities), u, side="right"))
    return min(j, model.n_levels - 1)


def signal_from_increments(
    j: int, model: SpectralModel, sigma: float, times: np.ndarray, db: np.ndarray
) -> np.ndarray:
    """Signal path ``xi`` on ``times`` from Brownian increments ``db``."""
    times = np.asarray(times, dtype=float)
    db = np.asarray(db, dtype=float)
    if db.shape[-1] != times.size - 1:
        raise ContractError("need one Brownian increment per grid step")
    drift = sigma * model.energies[j] * np.diff(times)
    xi = np.zeros(db.shape[:-1] + (times.size,))
    np.cumsum(drift + db, axis=-1, out=xi[..., 1:])
    return xi


def simulate_signal(
    j: int, model: SpectralModel, params: ReductionParams, rng: np.random.Generator
) -> np.ndarray:
    if not 0 <= j < model.n_levels:
        raise ContractError(f"level index {j} out of range")
    grid = TimeGrid.from_params(params)
    db = brownian_increments(rng, grid.n_steps, grid.dt)
    return signal_from_increments(j, model, params.sigma, grid.times, db)


def log_weights(model: SpectralModel, sigma: float, xi, t) -> np.ndarray:
    """Unnormalised log posterior ``log pi_i + sigma E_i xi - sigma^2 E_i^2 t / 2``."""
    e = model.energies
    xi = np.asarray(xi, dtype=float)[..., None]
    t = np.asarray(t, dtype=float)[..., None]
    with np.errstate(divide="ignore"):
        log_prior = np.log(model.probabilities)
    return log_prior + sigma * e * xi - 0.5 * sigma**2 * e**2 * t


def conditional_probabilities(model: SpectralModel, sigma: float, xi, t) -> np.ndarray:
    """Posterior probability of each level given the signal value at time t."""
    z = log_weights(model, sigma, xi, t)
    z -= z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=-1, keepdims=True)
    return w


def conditional_moments(pi_vec, energies) -> tuple:
    """Mean, variance and third central moment under ``pi_vec`` (last axis)."""
    pi_vec = np.asarray(pi_vec, dtype=float)
    e = np.asarray(energies, dtype=float)
    h = np.sum(pi_vec * e, axis=-1)
    dev = e - h[..., None]
    v = np.sum(pi_vec * dev**2, axis=-1)
    beta = np.sum(pi_vec * dev**3, axis=-1)
    return h, v, beta


def energy_function(model: SpectralModel, sigma: float, xi, t):
    """``H(xi, t)``: conditional mean energy as a function of signal and time."""
    return conditional_moments(conditional_probabilities(model, sigma, xi, t), model.energies)[0]


def variance_function(model: SpectralModel, sigma: float, xi, t):
    return conditional_moments(conditional_probabilities(model, sigma, xi, t), model.energies)[1]


def state_vector(model: SpectralModel, sigma: float, xi, t) -> np.ndarray:
    pi_vec = conditional_probabilities(model, sigma, xi, t)
    t = np.asarray(t, dtype=float)[..., None]
    return model.phases * np.exp(-1j * model.energies * t) * np.sqrt(pi_vec)


def innovation_path(xi, h, sigma: float, grid: TimeGrid) -> np.ndarray:
    """``W_t = xi_t - sigma * int_0^t H ds`` with the trapezoid rule on ``grid``."""
    xi = np.asarray(xi, dtype=float)
    h = np.asarray(h, dtype=float)
    n = len(grid)
    if xi.shape != h.shape or xi.shape[-1] != n:
        raise ContractError(
            f"xi {xi.shape} and h {h.shape} must both end in the grid length {n}"
        )
    steps = 0.5 * (h[..., 1:] + h[..., :-1]) * np.diff(grid.times)
    integral = np.zeros_like(h)
    np.cumsum(steps, axis=-1, out=integral[..., 1:])
    return xi - sigma * integral


def exponential_martingale(sigma: float, omega, b, t):
    return np.exp(sigma * omega * np.asarray(b) - 0.5 * sigma**2 * omega**2 * np.asarray(t))


def realized_energy_two_state(model: SpectralModel, sigma: float, j: int, b, t):
    """Energy along a path that ends in level ``j``, written through the
    exponential martingales of the competing levels.

    ``b`` is the Brownian value (not the signal).  Evaluated directly, so it
    overflows once ``sigma * omega * b`` exceeds ~700; use the Bayes route there.
    """
    if model.n_levels < 2:
        raise ContractError("need at least two levels")
    e, p = model.energies, model.probabilities
    num = p[j] * e[j]
    den = p[j]
    for i in range(model.n_levels):
        if i == j:
            continue
        m = exponential_martingale(sigma, e[i] - e[j], b, t)
        num = num + p[i] * e[i] * m
        den = den + p[i] * m
    return num / den


def reduction_probability(beta_rate: float, t: float, n: float) -> float:
    """Probability that the two-state martingale has fallen below ``exp(-n)``
    by time ``t``, i.e. ``N(sqrt(beta t) - n / (2 sqrt(beta t)))``."""
    if not beta_rate > 0:
        raise ValueError("beta_rate must be positive")
    if not t > 0:
        raise ValueError("t must be positive")
    s = math.sqrt(beta_rate * t)
    x = s - 0.5 * n / s
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def classify_reduction(
    pi_t: np.ndarray,
    times: np.ndarray,
    epsilon: float,
    criterion: str = "probability",
    h: np.ndarray | None = None,
    energies: np.ndarray | None = None,
):
    """Terminal level and first-passage time of the reduction threshold.

    ``criterion="probability"``: reduced to i when Pi_i > 1 - epsilon.
    ``criterion="energy"``: reduced to i when |H - E_i| < epsilon * (E_max - E_min).
    Works on a single path (pi_t of shape (K, n)) or a batch (m, K, n); returns
    arrays for a batch.  Unreduced paths get level -1 and time NaN.
    """
    pi_t = np.asarray(pi_t)
    if criterion == "probability":
        hit = pi_t > 1.0 - epsilon
    elif criterion == "energy":
        if h is None or energies is None:
            raise ContractError("energy criterion needs h and energies")
        e = np.asarray(energies, dtype=float)
        spread = float(e[-1] - e[0]) if e.size > 1 else 1.0
        hit = np.abs(np.asarray(h)[..., None] - e) < epsilon * spread
    else:
        raise ValueError(f"unknown reduction criterion {criterion!r}")

    final = hit[..., -1, :]
    level = np.where(final.any(axis=-1), final.argmax(axis=-1), -1)
    hits = np.take_along_axis(hit, np.maximum(level, 0)[..., None, None], axis=-1)[..., 0]
    first = hits.argmax(axis=-1)
    t_red = np.where(level >= 0, np.asarray(times)[first], np.nan)
    if level.ndim == 0:
        return int(level), float(t_red)
    return level, t_red


def simulate_trajectory(
    model: SpectralModel,
    params: ReductionParams,
    path_index: int = 0,
    rng: np.random.Generator | None = None,
    criterion: str = "probability",
) -> TrajectoryPath:
    """Generate one reduction trajectory in closed form.

    The stream defaults to ``path_stream(params.seed, path_index)``, so
    ``simulate_trajectory(model, params, k)`` reproduces path ``k`` of an
    ensemble run under the same root seed.
    """
    if rng is None:
        rng = path_stream(params.seed, path_index)
    grid = TimeGrid.from_params(params)
    sigma = params.sigma
    j = sample_terminal_energy(model, rng)
    xi = simulate_signal(j, model, params, rng)
    pi_t = conditional_probabilities(model, sigma, xi, grid.times)
    h, v, skew = conditional_moments(pi_t, model.energies)
    amps = model.phases * np.exp(-1j * np.outer(grid.times, model.energies)) * np.sqrt(pi_t)
    w = innovation_path(xi, h, sigma, grid)
    level, t_red = classify_reduction(
        pi_t, grid.times, params.reduction_epsilon, criterion, h, model.energies
    )
    return TrajectoryPath(
        grid=grid,
        sigma=sigma,
        energies=model.energies,
        terminal_index=j,
        xi=xi,
        w=w,
        pi_t=pi_t,
        h=h,
        v=v,
        skew=skew,
        amplitudes=amps,
        reduced_level=level,
        reduction_time=t_red,
    )
