import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modese.dsp import Spectrogram
from modese.errors import ConfigError, DataError
from modese.mask import DEFAULT_BETA, EnhanceConfig, compute_irm, hard_enhance, soft_enhance, soft_gain


def noisy_spec(n=4, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((n, 257)) + 1j * rng.standard_normal((n, 257))
    return Spectrogram(frames, 512, 256, "hann", 16000, 256 * n)


class TestIrm:
    def test_equal_power(self):
        s = np.full(257, 2.0 + 1j)
        n = np.full(257, 1.0 - 2j)
        np.testing.assert_allclose(compute_irm(s, n, 0.5), math.sqrt(0.5))
        assert compute_irm(s, n, 0.5)[0] == pytest.approx(0.70711, abs=1e-5)

    def test_no_noise(self):
        s = np.linspace(0.1, 3, 257)
        assert np.all(compute_irm(s, np.zeros(257)) == 1.0)

    def test_no_speech(self):
        assert np.all(compute_irm(np.zeros(257), np.ones(257)) == 0.0)

    def test_both_zero(self):
        assert np.all(compute_irm(np.zeros(5), np.zeros(5)) == 0.0)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            compute_irm(np.ones(5), np.ones(6))

    def test_bad_gamma(self):
        with pytest.raises(ConfigError):
            compute_irm(np.ones(3), np.ones(3), 1.5)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 16, elements=st.floats(1e-3, 1e3)), arrays(np.float64, 16, elements=st.floats(1e-3, 1e3)))
    def test_snr_form_and_monotonicity(self, s, n):
        irm = compute_irm(s, n, 0.5)
        xi = s**2 / n**2
        np.testing.assert_allclose(irm, np.sqrt(xi / (1 + xi)), rtol=1e-12)
        assert np.all((irm >= 0) & (irm <= 1))
        assert np.all(compute_irm(2 * s, n, 0.5) >= irm)


class TestHard:
    def test_ones_identity(self):
        x = noisy_spec()
        assert np.array_equal(hard_enhance(x, np.ones((4, 257))).frames, x.frames)

    def test_zeros(self):
        assert np.all(hard_enhance(noisy_spec(), np.zeros((4, 257))).frames == 0)

    def test_half(self):
        x = noisy_spec()
        y = hard_enhance(x, np.full((4, 257), 0.5)).frames
        np.testing.assert_allclose(np.abs(y), 0.5 * np.abs(x.frames))
        np.testing.assert_allclose(np.angle(y), np.angle(x.frames), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            hard_enhance(noisy_spec(), np.ones((3, 257)))


class TestSoft:
    def test_rho_one_is_identity(self):
        x = noisy_spec()
        for beta in (0.1, DEFAULT_BETA, 7.0):
            assert np.array_equal(soft_enhance(x, np.ones((4, 257)), beta).frames, x.frames)

    def test_rho_zero_is_minus_20db(self):
        x = noisy_spec()
        y = soft_enhance(x, np.zeros((4, 257)), math.log(10)).frames
        np.testing.assert_allclose(np.abs(y), 0.1 * np.abs(x.frames), rtol=1e-12)

    def test_rho_half(self):
        assert soft_gain(0.5, math.log(10)) == pytest.approx(10 ** -0.5)
        assert soft_gain(0.5, math.log(10)) == pytest.approx(0.316228, abs=1e-6)

    def test_default_beta_from_attenuation(self):
        assert EnhanceConfig.from_attenuation_db(20.0).beta == pytest.approx(DEFAULT_BETA)
        assert math.exp(-DEFAULT_BETA) == pytest.approx(0.1)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 257), elements=st.floats(0, 1)), st.floats(0.01, 10))
    def test_gain_bounds_and_phase(self, rho, beta):
        x = noisy_spec()
        y = soft_enhance(x, rho, beta).frames
        gain = soft_gain(rho, beta)
        # output is the input scaled by a real, nonnegative gain: phase is untouched
        assert np.array_equal(y, x.frames * gain)
        assert np.all(gain >= math.exp(-beta) * (1 - 1e-12)) and np.all(gain <= 1)

    def test_bad_beta(self):
        with pytest.raises(ConfigError):
            soft_enhance(noisy_spec(), np.ones((4, 257)), 0.0)
