"""Tests for the synthetic pericardial potential and the noise model.

Frozen values come from evaluating the closed forms by hand: the biphasic
depolarisation pulse is -25 tanh(z) sech^2(z) with z = 2 (phase - 0.18) / 0.1,
so it vanishes at 18 percent of the cycle, reaches -25 tanh(1) sech^2(1) =
-7.9962501056153 one half-width later and attains the extreme magnitude
25 * 2 / (3 sqrt(3)) = 9.6225 at tanh(z) = 1/sqrt(3).  The repolarisation
amplitude is 25 / (2 sqrt(2 pi)) = 4.986778505017909.
"""

import numpy as np
import pytest

from ecguq import forward_data

PERIOD = 690.0


class TestPulses:
    def test_depolarisation_zero_at_centre(self):
        assert forward_data.depolarisation_pulse(0.18 * PERIOD, PERIOD) == 0.0

    def test_depolarisation_frozen_value(self):
        val = forward_data.depolarisation_pulse(0.23 * PERIOD, PERIOD)
        assert val == pytest.approx(-7.9962501056153, rel=1e-12)

    def test_depolarisation_is_odd_about_centre(self):
        dt = np.linspace(0.0, 0.04, 9) * PERIOD
        left = forward_data.depolarisation_pulse(0.18 * PERIOD - dt, PERIOD)
        right = forward_data.depolarisation_pulse(0.18 * PERIOD + dt, PERIOD)
        assert np.allclose(left, -right, rtol=0.0, atol=1e-12)

    def test_depolarisation_extreme_magnitude(self):
        t = np.linspace(0.0, PERIOD, 20001)
        vals = forward_data.depolarisation_pulse(t, PERIOD)
        assert np.abs(vals).max() == pytest.approx(25.0 * 2.0 / (3.0 * np.sqrt(3.0)), rel=1e-5)

    def test_repolarisation_peak(self):
        val = forward_data.repolarisation_pulse(0.63 * PERIOD, PERIOD)
        assert val == pytest.approx(25.0 / (2.0 * np.sqrt(2.0 * np.pi)), rel=1e-12)
        t = np.linspace(0.0, PERIOD, 20001)
        vals = forward_data.repolarisation_pulse(t, PERIOD)
        assert vals.max() <= val * (1.0 + 1e-12)
        assert vals.min() >= 0.0

    def test_periodicity_and_phase_wrap(self):
        t = np.linspace(0.0, PERIOD, 41)
        for pulse in (forward_data.depolarisation_pulse, forward_data.repolarisation_pulse):
            base = pulse(t, PERIOD)
            assert np.allclose(pulse(t + 7.0 * PERIOD, PERIOD), base, rtol=0.0, atol=1e-10)
            assert np.allclose(pulse(t - 3.0 * PERIOD, PERIOD), base, rtol=0.0, atol=1e-10)


class TestActivationDelay:
    def test_endpoints(self):
        assert forward_data.activation_delay(0.0) == pytest.approx(0.0, abs=1e-15)
        assert forward_data.activation_delay(0.5) == pytest.approx(0.22, rel=1e-12)
        assert forward_data.activation_delay(1.0) == pytest.approx(0.0, abs=1e-12)

    def test_range_and_symmetry(self):
        s = np.linspace(0.0, 1.0, 101)
        d = forward_data.activation_delay(s)
        assert np.all(d >= 0.0) and np.all(d <= 0.22 + 1e-15)
        assert np.allclose(d, forward_data.activation_delay(1.0 - s), rtol=0.0, atol=1e-12)


class TestPericardialPotential:
    def test_delay_shifts_the_waveform(self):
        # the potential at s is the s = 0 waveform delayed by delta(s) T
        s = 0.5
        t = np.linspace(0.0, PERIOD, 37)
        delayed = forward_data.pericardial_potential(s, t, PERIOD)
        base = forward_data.pericardial_potential(
            0.0, t - forward_data.activation_delay(s) * PERIOD, PERIOD
        )
        assert np.allclose(delayed, base, rtol=0.0, atol=1e-12)

    def test_frozen_value(self):
        val = forward_data.pericardial_potential(0.5, 0.23 * PERIOD, PERIOD)
        assert val == pytest.approx(0.11088522835731386, rel=1e-12)

    def test_broadcasting(self):
        s = np.linspace(0.0, 1.0, 5)[:, None]
        t = np.linspace(0.0, PERIOD, 7)[None, :]
        out = forward_data.pericardial_potential(s, t, PERIOD)
        assert out.shape == (5, 7)
        assert out[2, 3] == forward_data.pericardial_potential(s[2, 0], t[0, 3], PERIOD)

    def test_time_periodicity(self):
        s = np.linspace(0.0, 1.0, 11)
        a = forward_data.pericardial_potential(s, 123.0, PERIOD)
        b = forward_data.pericardial_potential(s, 123.0 + PERIOD, PERIOD)
        assert np.allclose(a, b, rtol=0.0, atol=1e-10)


class TestAddNoise:
    def test_zero_variance_returns_independent_copy(self):
        values = np.ones((3, 4))
        out = forward_data.add_noise(values, 0.0, seed=1)
        assert np.array_equal(out, values)
        out[0, 0] = 99.0
        assert values[0, 0] == 1.0

    def test_seed_reproducibility(self):
        values = np.zeros((20, 30))
        a = forward_data.add_noise(values, 1e-2, seed=7)
        b = forward_data.add_noise(values, 1e-2, seed=7)
        c = forward_data.add_noise(values, 1e-2, seed=8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_noise_statistics(self):
        values = np.zeros(200000)
        out = forward_data.add_noise(values, 4.0, seed=3)
        assert out.mean() == pytest.approx(0.0, abs=0.02)
        assert out.var() == pytest.approx(4.0, rel=0.02)

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError, match="variance"):
            forward_data.add_noise(np.ones(3), -1.0, seed=0)
