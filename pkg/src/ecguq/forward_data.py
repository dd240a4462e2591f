"""Synthetic pericardial potential over one heart cycle, and measurement noise.

The potential at boundary parameter s combines a travelling depolarisation
pulse and a slower repolarisation pulse, both periodic in time, delayed by
an activation map over the boundary:

    u(s, t) = u_dep(t - delta(s) T) + u_rep(t - delta(s) T).

The potential rides the material parameter s, so boundary deformations
carry the values with the moving points.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "depolarisation_pulse",
    "repolarisation_pulse",
    "activation_delay",
    "pericardial_potential",
    "add_noise",
]


def _phase(t, period: float) -> np.ndarray:
    return np.mod(np.asarray(t, float) / period, 1.0)


def depolarisation_pulse(t, period: float) -> np.ndarray:
    """Sharp biphasic pulse centred at 18 percent of the cycle, width 10 percent."""
    x = _phase(t, period) - 0.18
    z = 2.0 * (x - np.floor(0.5 + x)) / 0.1
    return -25.0 * np.tanh(z) / np.cosh(z) ** 2


def repolarisation_pulse(t, period: float) -> np.ndarray:
    """Gaussian pulse at 63 percent of the cycle plus its periodic image."""
    x = _phase(t, period)
    amp = 25.0 / (2.0 * np.sqrt(2.0 * np.pi))
    return amp * (np.exp(-100.0 * (x - 0.63) ** 2) + np.exp(-100.0 * (x + 0.37) ** 2))


def activation_delay(s) -> np.ndarray:
    """Activation map over the boundary: 0 at s = 0, peaking at 0.22 opposite it."""
    return 0.22 * (np.cos(2.0 * np.pi * np.asarray(s, float) - np.pi) + 1.0) / 2.0


def pericardial_potential(s, t, period: float) -> np.ndarray:
    """Potential u(s, t); arguments broadcast against each other."""
    shifted = np.asarray(t, float) - activation_delay(s) * period
    return depolarisation_pulse(shifted, period) + repolarisation_pulse(shifted, period)


def add_noise(values: np.ndarray, variance: float, seed: int) -> np.ndarray:
    """Add i.i.d. centred Gaussian noise from a counter-based generator.

    The same seed, variance and shape reproduce the same noise exactly;
    zero variance returns the input unchanged.
    """
    values = np.asarray(values, float)
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    if variance == 0.0:
        return values.copy()
    rng = np.random.Generator(np.random.Philox(seed))
    return values + rng.normal(0.0, np.sqrt(variance), values.shape)
