import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collapse_sim.model import (
    InvalidModelError,
    LevelInput,
    ReductionParams,
    SpectralModel,
    build_spectral_model,
    initial_moments,
    reduction_timescale,
    two_state_rate,
)


class TestBuildSpectralModel:
    def test_equal_superposition(self):
        m = build_spectral_model([LevelInput(-1, 1 / math.sqrt(2)), LevelInput(1, 1 / math.sqrt(2))])
        np.testing.assert_array_equal(m.energies, [-1, 1])
        np.testing.assert_allclose(m.probabilities, [0.5, 0.5], atol=1e-15)

    def test_degenerate_levels_merge(self):
        m = build_spectral_model([LevelInput(1, 0.6), LevelInput(1, 0), LevelInput(2, 0.8)])
        np.testing.assert_array_equal(m.energies, [1, 2])
        np.testing.assert_allclose(m.probabilities, [0.36, 0.64], atol=1e-15)

    def test_squared_moduli(self):
        m = build_spectral_model([(0, math.sqrt(0.3)), (1, math.sqrt(0.7))])
        np.testing.assert_allclose(m.probabilities, [0.3, 0.7], atol=1e-15)

    def test_unnormalised_amplitudes(self):
        m = build_spectral_model([(0, 3.0), (1, 4.0j)])
        np.testing.assert_allclose(m.probabilities, [9 / 25, 16 / 25], atol=1e-15)
        np.testing.assert_allclose(m.phases, [1, 1j])

    def test_degenerate_pair_is_luders_projection(self):
        # |0.3|^2 + |0.4i|^2 = 0.25 on E = 0; phase of the larger component
        m = build_spectral_model([(0, 0.3), (0, 0.4j), (1, math.sqrt(0.75))])
        np.testing.assert_allclose(m.probabilities, [0.25, 0.75], atol=1e-15)
        assert m.phases[0] == pytest.approx(1j)

    def test_near_degenerate_within_tolerance(self):
        m = build_spectral_model([(1.0, 1.0), (1.0 + 1e-14, 1.0), (2.0, 1.0)])
        assert m.n_levels == 2
        np.testing.assert_allclose(m.probabilities, [2 / 3, 1 / 3])

    def test_explicit_merge_tol(self):
        levels = [(1.0, 1.0), (1.001, 1.0)]
        assert build_spectral_model(levels).n_levels == 2
        assert build_spectral_model(levels, merge_tol=0.01).n_levels == 1

    def test_zero_weight_level_dropped(self):
        m = build_spectral_model([(0, 1.0), (3, 0.0)])
        assert m.n_levels == 1

    def test_empty_input(self):
        with pytest.raises(InvalidModelError):
            build_spectral_model([])

    def test_all_zero_amplitudes(self):
        with pytest.raises(InvalidModelError):
            build_spectral_model([(0, 0.0), (1, 0j)])

    def test_model_is_read_only(self, born):
        with pytest.raises(ValueError):
            born.probabilities[0] = 1.0

    def test_invalid_direct_construction(self):
        with pytest.raises(InvalidModelError):
            SpectralModel([1.0, 0.0], [0.5, 0.5])
        with pytest.raises(InvalidModelError):
            SpectralModel([0.0, 1.0], [0.5, 0.6])


levels_strategy = st.lists(
    st.tuples(
        st.sampled_from([-2.0, -0.5, 0.0, 0.5, 1.0, 3.0]),
        st.floats(-1, 1),
        st.floats(-1, 1),
    ),
    min_size=1,
    max_size=8,
).filter(lambda xs: sum(re * re + im * im for _, re, im in xs) > 1e-6)


@given(levels_strategy, st.randoms())
@settings(max_examples=200, deadline=None)
def test_probabilities_normalised_and_order_independent(levels, rnd):
    items = [LevelInput(e, complex(re, im)) for e, re, im in levels]
    m = build_spectral_model(items)
    assert abs(m.probabilities.sum() - 1) <= 1e-12
    assert np.all((m.probabilities >= 0) & (m.probabilities <= 1))
    assert np.all(np.diff(m.energies) > 0)
    shuffled = list(items)
    rnd.shuffle(shuffled)
    m2 = build_spectral_model(shuffled)
    np.testing.assert_array_equal(m.energies, m2.energies)
    np.testing.assert_allclose(m.probabilities, m2.probabilities, rtol=0, atol=1e-15)
    h0, v0, _ = initial_moments(m)
    assert v0 >= 0
    assert (v0 == 0) == (m.n_levels == 1)


def _moments_by_enumeration(energies, probs):
    # exhaustive sums, written independently of the package
    h = sum(p * e for e, p in zip(energies, probs))
    v = sum(p * (e - h) ** 2 for e, p in zip(energies, probs))
    b = sum(p * (e - h) ** 3 for e, p in zip(energies, probs))
    return h, v, b


class TestMoments:
    def test_symmetric(self, symmetric):
        assert initial_moments(symmetric) == pytest.approx((0, 1, 0), abs=1e-15)

    def test_born(self, born):
        expected = _moments_by_enumeration([0, 1], [0.3, 0.7])
        assert expected == pytest.approx((0.7, 0.21, -0.084), abs=1e-15)
        assert initial_moments(born) == pytest.approx(expected, abs=1e-14)

    def test_eigenstate(self, eigenstate):
        assert initial_moments(eigenstate) == (5.0, 0.0, 0.0)

    def test_timescales(self, symmetric, born, eigenstate):
        assert reduction_timescale(symmetric, 1.0) == pytest.approx(1.0)
        assert reduction_timescale(symmetric, 2.0) == pytest.approx(0.25)
        assert reduction_timescale(born, 1.0) == pytest.approx(1 / 0.21)
        assert reduction_timescale(born, 1.0) == pytest.approx(4.7619, abs=1e-4)
        assert math.isinf(reduction_timescale(eigenstate, 1.0))

    def test_two_state_rate(self, symmetric, born):
        assert two_state_rate(symmetric, 1.0) == pytest.approx(1.0)
        assert two_state_rate(born, 2.0) == pytest.approx(1.0)


class TestReductionParams:
    def test_step_count(self):
        assert ReductionParams(1.0, 20.0, 0.005).n_steps == 4000

    @pytest.mark.parametrize(
        "kw",
        [
            dict(sigma=-1.0, t_max=1.0, dt=0.1),
            dict(sigma=1.0, t_max=1.0, dt=1.0),
            dict(sigma=1.0, t_max=1.0, dt=0.3),
            dict(sigma=1.0, t_max=1.0, dt=0.1, reduction_epsilon=1.0),
            dict(sigma=1.0, t_max=1.0, dt=1e-8),
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ReductionParams(**kw)

    def test_default_epsilon(self):
        assert ReductionParams(1.0, 1.0, 0.1).reduction_epsilon == 1e-4
