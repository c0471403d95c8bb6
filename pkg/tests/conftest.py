import numpy as np
import pytest

from collapse_sim.model import model_from_pairs


@pytest.fixture
def symmetric():
    """E = (-1, 1) with equal weights: H0 = 0, V0 = 1, tau_R = 1/sigma^2."""
    return model_from_pairs([(-1.0, np.sqrt(0.5)), (1.0, np.sqrt(0.5))])


@pytest.fixture
def born():
    """E = (0, 1) with weights (0.3, 0.7)."""
    return model_from_pairs([(0.0, np.sqrt(0.3)), (1.0, np.sqrt(0.7))])


@pytest.fixture
def eigenstate():
    return model_from_pairs([(5.0, 1.0)])


def random_model(rng, n=None):
    n = n or int(rng.integers(2, 6))
    energies = np.sort(rng.uniform(-2.0, 2.0, n))
    amps = rng.uniform(0.2, 1.0, n) * np.exp(1j * rng.uniform(0, 2 * np.pi, n))
    return model_from_pairs(list(zip(energies, amps)))
