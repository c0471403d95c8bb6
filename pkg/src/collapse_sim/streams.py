"""Reproducible per-path random streams.

Each trajectory gets its own Philox (counter-based) generator keyed by
``(root_seed, path_index)`` through :class:`numpy.random.SeedSequence`
spawn keys, so paths are independent by construction and can be generated in
any order or on any worker.
"""

from __future__ import annotations

import numpy as np


def path_stream(root_seed: int, path_index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(root_seed), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(ss))


def brownian_increments(rng: np.random.Generator, n_steps: int, dt: float) -> np.ndarray:
    """``n_steps`` independent N(0, dt) increments, one normal draw each."""
    return rng.standard_normal(n_steps) * np.sqrt(dt)
