"""Built-in reference anatomy: a fixed chest section and a beating heart boundary.

All lengths in centimetres, times in milliseconds.  The heart boundary is
an ellipse-like Fourier curve whose coefficients vary over the cycle
through a smooth contraction profile c(t) built from first and second
time harmonics, calibrated so full relaxation sits at t = 0 and peak
contraction at t = 270 within a 690 ms cycle.  Every coefficient is a
trigonometric polynomial of order two in time, so trigonometric time
interpolation through 5 or more uniform slices reproduces the family
exactly.
"""

from __future__ import annotations

import numpy as np

from .geometry import ClosedCurve, TimeCurveFamily

__all__ = [
    "PERIOD_MS",
    "SYSTOLE_MS",
    "ACQUIRED_SLICES",
    "reference_chest",
    "contraction_profile",
    "reference_heart",
    "reference_heart_family",
    "concentric_circles",
]

PERIOD_MS = 690.0
SYSTOLE_MS = 270.0
# Number of time slices the bundled anatomy is "acquired" at before any
# interpolation, mirroring a short-axis cine protocol.
ACQUIRED_SLICES = 25


def reference_chest() -> ClosedCurve:
    """Chest boundary: a 33 cm wide oval with mild second and third harmonics."""
    cos_c = np.zeros((4, 2))
    sin_c = np.zeros((4, 2))
    cos_c[1, 0] = 16.5
    cos_c[2, 0] = 1.3
    cos_c[3, 0] = 0.4
    sin_c[1, 1] = 11.8
    sin_c[2, 1] = 1.0
    sin_c[3, 1] = -0.5
    return ClosedCurve(cos_c, sin_c)


def _contraction_coeffs() -> tuple[float, float]:
    """Solve for the profile c(t) = a (1 - cos tau) + b (sin 2 tau - 2 sin tau).

    The ansatz has c(0) = 0 and c'(0) = 0 built in; a and b are fixed by
    c(tau_s) = 1 and c'(tau_s) = 0 at the contraction phase tau_s.
    """
    tau_s = 2.0 * np.pi * SYSTOLE_MS / PERIOD_MS
    lhs = np.array(
        [
            [1.0 - np.cos(tau_s), np.sin(2.0 * tau_s) - 2.0 * np.sin(tau_s)],
            [np.sin(tau_s), 2.0 * np.cos(2.0 * tau_s) - 2.0 * np.cos(tau_s)],
        ]
    )
    a, b = np.linalg.solve(lhs, np.array([1.0, 0.0]))
    return float(a), float(b)


_PROFILE_A, _PROFILE_B = _contraction_coeffs()


def contraction_profile(t) -> np.ndarray:
    """Contraction fraction over the cycle: 0 at t = 0, 1 at peak systole."""
    tau = 2.0 * np.pi * np.asarray(t, float) / PERIOD_MS
    return _PROFILE_A * (1.0 - np.cos(tau)) + _PROFILE_B * (
        np.sin(2.0 * tau) - 2.0 * np.sin(tau)
    )


def reference_heart(t: float) -> ClosedCurve:
    """Heart boundary at time t (ms)."""
    c = float(contraction_profile(t))
    cos_c = np.zeros((4, 2))
    sin_c = np.zeros((4, 2))
    cos_c[0, 0] = -4.0 + 0.5 * c
    cos_c[0, 1] = 2.5 + 0.8 * c
    cos_c[1, 0] = 4.7 - 0.6 * c
    sin_c[1, 1] = 3.9 - 0.65 * c
    cos_c[2, 0] = 0.5 - 0.15 * c
    sin_c[2, 1] = -0.4 + 0.1 * c
    cos_c[3, 0] = 0.12
    sin_c[3, 1] = 0.1
    return ClosedCurve(cos_c, sin_c)


def reference_heart_family(n_slices: int = ACQUIRED_SLICES) -> TimeCurveFamily:
    """Heart boundaries at n uniform times over the cycle."""
    times = np.arange(n_slices) * (PERIOD_MS / n_slices)
    return TimeCurveFamily(tuple(reference_heart(t) for t in times), times, PERIOD_MS)


def concentric_circles(inner_radius: float = 1.0, outer_radius: float = 2.0) -> tuple[ClosedCurve, ClosedCurve]:
    """Concentric circles used by validation runs and closed-form checks."""
    if not 0 < inner_radius < outer_radius:
        raise ValueError("need 0 < inner_radius < outer_radius")
    inner = np.zeros((2, 2)), np.zeros((2, 2))
    inner[0][1, 0] = inner_radius
    inner[1][1, 1] = inner_radius
    outer = np.zeros((2, 2)), np.zeros((2, 2))
    outer[0][1, 0] = outer_radius
    outer[1][1, 1] = outer_radius
    return ClosedCurve(*inner), ClosedCurve(*outer)
