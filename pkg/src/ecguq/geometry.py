"""Closed boundary curves as truncated Fourier series, and families of them in time.

A curve is stored as real Fourier coefficients per spatial component,

    x(s) = sum_k a_k^x cos(2 pi k s) + b_k^x sin(2 pi k s),   s in [0, 1),

and likewise for y, so parameter derivatives up to second order are exact.
Lengths are centimetres, times milliseconds throughout the package.  A
time-dependent boundary is an ordered family of curves over one period,
treated as periodic in time.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCurveError, FitConvergenceError

logger = logging.getLogger(__name__)

__all__ = [
    "ClosedCurve",
    "TimeCurveFamily",
    "eval_curve",
    "outward_normal",
    "fit_fourier",
    "interpolate_time",
    "read_contour_csv",
    "write_contour_csv",
    "family_from_contours",
    "write_curve_csv",
    "read_curve_csv",
]

# Tangent norms below this are treated as a degenerate parameterisation.
_TANGENT_TINY = 1e-12


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ClosedCurve:
    """Closed plane curve given by real Fourier coefficients.

    Parameters
    ----------
    cos_coeffs, sin_coeffs : ndarray, shape (M + 1, 2)
        Row k holds the cos / sin coefficients of order k for the x and y
        components.  Row 0 of ``sin_coeffs`` must be zero.
    """

    cos_coeffs: np.ndarray
    sin_coeffs: np.ndarray

    def __post_init__(self):
        cos_c = _as_readonly(self.cos_coeffs)
        sin_c = _as_readonly(self.sin_coeffs)
        if cos_c.ndim != 2 or cos_c.shape[1] != 2 or cos_c.shape != sin_c.shape:
            raise ValueError("coefficient arrays must both have shape (M + 1, 2)")
        if cos_c.shape[0] < 1:
            raise ValueError("need at least the constant coefficient row")
        if not (np.isfinite(cos_c).all() and np.isfinite(sin_c).all()):
            raise ValueError("coefficients must be finite")
        if np.any(sin_c[0] != 0.0):
            raise ValueError("sin coefficients of order 0 must be zero")
        object.__setattr__(self, "cos_coeffs", cos_c)
        object.__setattr__(self, "sin_coeffs", sin_c)

    @property
    def order(self) -> int:
        """Highest retained Fourier order M."""
        return self.cos_coeffs.shape[0] - 1

    def evaluate(self, s, derivative: int = 0) -> np.ndarray:
        """Evaluate the curve or a parameter derivative.

        Parameters
        ----------
        s : array_like
            Parameter values; the series is 1-periodic, any real value works.
        derivative : int
            0 for position, 1 and 2 for d/ds and d^2/ds^2.

        Returns
        -------
        ndarray, shape (len(s), 2)
        """
        if derivative not in (0, 1, 2):
            raise ValueError("derivative must be 0, 1 or 2")
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = np.arange(self.order + 1)
        ang = 2.0 * np.pi * s[:, None] * k[None, :]
        c, sn = np.cos(ang), np.sin(ang)
        w = 2.0 * np.pi * k
        if derivative == 0:
            return c @ self.cos_coeffs + sn @ self.sin_coeffs
        if derivative == 1:
            return (sn * w) @ (-self.cos_coeffs) + (c * w) @ self.sin_coeffs
        w2 = w * w
        return (c * w2) @ (-self.cos_coeffs) + (sn * w2) @ (-self.sin_coeffs)

    def frames(self, s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position, first and second derivative in one pass (shared trig tables)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = np.arange(self.order + 1)
        ang = 2.0 * np.pi * s[:, None] * k[None, :]
        c, sn = np.cos(ang), np.sin(ang)
        w = 2.0 * np.pi * k
        w2 = w * w
        p = c @ self.cos_coeffs + sn @ self.sin_coeffs
        d1 = (sn * w) @ (-self.cos_coeffs) + (c * w) @ self.sin_coeffs
        d2 = (c * w2) @ (-self.cos_coeffs) + (sn * w2) @ (-self.sin_coeffs)
        return p, d1, d2

    @classmethod
    def from_uniform_samples(cls, points: np.ndarray) -> "ClosedCurve":
        """Trigonometric interpolant through samples at s_j = j / n.

        The returned curve reproduces the samples exactly (to roundoff).  For
        even n the Nyquist order carries a cos term only.
        """
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 4:
            raise ValueError("need an (n, 2) array with n >= 4")
        if not np.isfinite(pts).all():
            raise ValueError("samples must be finite")
        n = pts.shape[0]
        spec = np.fft.rfft(pts, axis=0) / n
        m = spec.shape[0] - 1
        cos_c = np.zeros((m + 1, 2))
        sin_c = np.zeros((m + 1, 2))
        cos_c[0] = spec[0].real
        cos_c[1:] = 2.0 * spec[1:].real
        sin_c[1:] = -2.0 * spec[1:].imag
        if n % 2 == 0:
            # Nyquist bin is shared between +/- frequencies: cos only.
            cos_c[m] = spec[m].real
            sin_c[m] = 0.0
        return cls(cos_c, sin_c)

    def signed_area(self) -> float:
        """Area enclosed with sign: positive for counter-clockwise traversal."""
        n = max(4 * (self.order + 1) + 4, 16)
        s = np.arange(n) / n
        p, d1, _ = self.frames(s)
        return 0.5 * float(np.mean(p[:, 0] * d1[:, 1] - p[:, 1] * d1[:, 0]))

    def diameter(self, n: int = 256) -> float:
        """Bounding-box diagonal on a dense sample; scale proxy for cutoffs."""
        s = np.arange(n) / n
        p = self.evaluate(s)
        return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))


def eval_curve(curve: ClosedCurve, s, derivative: int = 0) -> np.ndarray:
    """Functional alias for :meth:`ClosedCurve.evaluate`."""
    return curve.evaluate(s, derivative)


def outward_normal(curve: ClosedCurve, s, boundary: str) -> np.ndarray:
    """Unit normals exterior to the annular domain between the two boundaries.

    Parameters
    ----------
    boundary : {"outer", "inner"}
        ``"outer"`` (chest) gives normals pointing away from the enclosed
        region; ``"inner"`` (pericardium) gives normals pointing into the
        cavity the curve encloses.  The result is independent of the
        traversal direction of the parameterisation.
    """
    if boundary not in ("outer", "inner"):
        raise ValueError("boundary must be 'outer' or 'inner'")
    d1 = curve.evaluate(s, derivative=1)
    speed = np.linalg.norm(d1, axis=1)
    if np.any(speed < _TANGENT_TINY):
        raise DegenerateCurveError("tangent vanishes; normal undefined")
    n = np.column_stack((d1[:, 1], -d1[:, 0])) / speed[:, None]
    sign = 1.0 if curve.signed_area() > 0 else -1.0
    if boundary == "inner":
        sign = -sign
    return sign * n


def fit_fourier(points: np.ndarray, threshold: float = 1e-3) -> ClosedCurve:
    """Least-squares Fourier fit of a closed contour polyline.

    Vertices are assigned uniform parameter values s_j = j / N in input
    order, so s = 0 sits at the first vertex.  The smallest order M whose
    relative RMS misfit (against the RMS spread of the points about their
    centroid) is at or below ``threshold`` wins; M never exceeds
    (N - 1) // 2 so the normal equations stay overdetermined.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (N, 2) array")
    if pts.shape[0] >= 2 and np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]  # drop an explicit closing vertex
    n = pts.shape[0]
    if n < 8:
        raise ValueError("need at least 8 distinct vertices")
    if not np.isfinite(pts).all():
        raise ValueError("vertices must be finite")
    gaps = np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)
    if np.any(gaps == 0.0):
        raise ValueError("repeated consecutive vertices")
    if not threshold > 0:
        raise ValueError("threshold must be positive")

    s = np.arange(n) / n
    spread = pts - pts.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum(spread**2, axis=1)))
    if scale == 0.0:
        raise ValueError("all vertices coincide with the centroid")

    m_max = (n - 1) // 2
    k = np.arange(1, m_max + 1)
    ang = 2.0 * np.pi * s[:, None] * k[None, :]
    cos_tab, sin_tab = np.cos(ang), np.sin(ang)
    for m in range(1, m_max + 1):
        design = np.hstack(
            [np.ones((n, 1)), cos_tab[:, :m], sin_tab[:, :m]]
        )
        coef, _, _, _ = np.linalg.lstsq(design, pts, rcond=None)
        resid = pts - design @ coef
        rel = np.sqrt(np.mean(np.sum(resid**2, axis=1))) / scale
        if rel <= threshold:
            cos_c = np.zeros((m + 1, 2))
            sin_c = np.zeros((m + 1, 2))
            cos_c[0] = coef[0]
            cos_c[1:] = coef[1 : m + 1]
            sin_c[1:] = coef[m + 1 :]
            curve = ClosedCurve(cos_c, sin_c)
            dense = np.arange(8 * (m + 1)) / (8 * (m + 1))
            speed = np.linalg.norm(curve.evaluate(dense, 1), axis=1)
            if speed.min() < _TANGENT_TINY * scale:
                raise DegenerateCurveError(
                    f"fitted curve of order {m} is irregular (min |g'| = {speed.min():.3e})"
                )
            logger.debug("fit_fourier: order %d, relative misfit %.3e", m, rel)
            return curve
    raise FitConvergenceError(
        f"no order up to {m_max} met threshold {threshold:g} (last misfit {rel:.3e})"
    )


@dataclass(frozen=True)
class TimeCurveFamily:
    """Curves at ordered sample times within one period.

    ``times`` are in [0, period) and strictly increasing; the family is
    treated as periodic in time.
    """

    curves: tuple[ClosedCurve, ...]
    times: np.ndarray
    period: float

    def __post_init__(self):
        times = _as_readonly(np.atleast_1d(self.times))
        if not self.period > 0:
            raise ValueError("period must be positive")
        if len(self.curves) != times.shape[0] or len(self.curves) == 0:
            raise ValueError("one curve per time sample required")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if times[0] < 0 or times[-1] >= self.period:
            raise ValueError("times must lie in [0, period)")
        object.__setattr__(self, "curves", tuple(self.curves))
        object.__setattr__(self, "times", times)

    @property
    def n_slices(self) -> int:
        return len(self.curves)

    @property
    def max_order(self) -> int:
        return max(c.order for c in self.curves)


def _padded_coeffs(family: TimeCurveFamily) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-slice coefficients zero-padded to the family's common order."""
    m = family.max_order
    n = family.n_slices
    cos_c = np.zeros((n, m + 1, 2))
    sin_c = np.zeros((n, m + 1, 2))
    for i, c in enumerate(family.curves):
        cos_c[i, : c.order + 1] = c.cos_coeffs
        sin_c[i, : c.order + 1] = c.sin_coeffs
    return cos_c, sin_c


def _trig_basis(times: np.ndarray, period: float, n_terms: int) -> np.ndarray:
    """Interpolation basis in time: 1, cos, sin pairs, Nyquist cos for even counts."""
    tau = 2.0 * np.pi * times / period
    cols = [np.ones_like(tau)]
    half = (n_terms - 1) // 2
    for k in range(1, half + 1):
        cols.append(np.cos(k * tau))
        cols.append(np.sin(k * tau))
    if n_terms % 2 == 0:
        cols.append(np.cos((half + 1) * tau))
    return np.column_stack(cols)


def interpolate_time(family: TimeCurveFamily, n_slices: int) -> TimeCurveFamily:
    """Trigonometric interpolation onto the uniform grid t_j = j * period / n_slices.

    Coefficients are interpolated order by order after zero-padding the family
    to a common Fourier order.  Requesting the family's own (uniform) time grid
    returns the family unchanged, so the operation is idempotent.
    """
    if n_slices < 1:
        raise ValueError("n_slices must be positive")
    new_times = np.arange(n_slices) * (family.period / n_slices)
    if n_slices == family.n_slices and np.array_equal(new_times, family.times):
        return family
    cos_c, sin_c = _padded_coeffs(family)
    n_in = family.n_slices
    basis_in = _trig_basis(family.times, family.period, n_in)
    basis_out = _trig_basis(new_times, family.period, n_in)
    # One solve per coefficient channel, shared factorisation via lstsq on a
    # square Vandermonde-type matrix.
    flat = np.concatenate(
        [cos_c.reshape(n_in, -1), sin_c.reshape(n_in, -1)], axis=1
    )
    weights = np.linalg.solve(basis_in, flat)
    out = basis_out @ weights
    m1 = cos_c.shape[1]
    cos_out = out[:, : 2 * m1].reshape(n_slices, m1, 2)
    sin_out = out[:, 2 * m1 :].reshape(n_slices, m1, 2)
    sin_out[:, 0, :] = 0.0  # roundoff guard; order 0 has no sin part
    curves = tuple(ClosedCurve(cos_out[i], sin_out[i]) for i in range(n_slices))
    return TimeCurveFamily(curves, new_times, family.period)


# ---------------------------------------------------------------------------
# File formats


def read_contour_csv(path) -> list[tuple[float, np.ndarray]]:
    """Read contour samples: header t_ms,x_cm,y_cm, one block per time value.

    Rows carrying the same t_ms value form one contour, in file order.
    Returns (time, points) pairs ordered by time.
    """
    blocks: dict[float, list[list[float]]] = {}
    order: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t_ms", "x_cm", "y_cm"]:
            raise ValueError(f"expected header t_ms,x_cm,y_cm in {path}")
        for row in reader:
            if not row:
                continue
            t, x, y = float(row[0]), float(row[1]), float(row[2])
            if t not in blocks:
                blocks[t] = []
                order.append(t)
            blocks[t].append([x, y])
    if not order:
        raise ValueError(f"no contour rows in {path}")
    out = [(t, np.asarray(blocks[t], dtype=float)) for t in order]
    out.sort(key=lambda item: item[0])
    return out


def write_contour_csv(path, blocks: list[tuple[float, np.ndarray]]) -> None:
    """Inverse of :func:`read_contour_csv`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_ms", "x_cm", "y_cm"])
        for t, pts in blocks:
            for x, y in np.asarray(pts, dtype=float):
                writer.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def family_from_contours(
    blocks: list[tuple[float, np.ndarray]], period: float, threshold: float = 1e-3
) -> TimeCurveFamily:
    """Fit each contour block and assemble the time family."""
    times = np.array([t for t, _ in blocks], dtype=float)
    curves = tuple(fit_fourier(pts, threshold) for _, pts in blocks)
    return TimeCurveFamily(curves, times, period)


def write_curve_csv(path, curve: ClosedCurve) -> None:
    """Write Fourier coefficients: header component,k,cos_coeff,sin_coeff."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "k", "cos_coeff", "sin_coeff"])
        for ci, name in enumerate(("x", "y")):
            for k in range(curve.order + 1):
                writer.writerow(
                    [name, k, repr(float(curve.cos_coeffs[k, ci])), repr(float(curve.sin_coeffs[k, ci]))]
                )


def read_curve_csv(path) -> ClosedCurve:
    """Read the format written by :func:`write_curve_csv`."""
    rows: dict[str, dict[int, tuple[float, float]]] = {"x": {}, "y": {}}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != [
            "component",
            "k",
            "cos_coeff",
            "sin_coeff",
        ]:
            raise ValueError(f"expected header component,k,cos_coeff,sin_coeff in {path}")
        for row in reader:
            if not row:
                continue
            comp, k = row[0].strip(), int(row[1])
            rows[comp][k] = (float(row[2]), float(row[3]))
    m = max(max(rows["x"]), max(rows["y"]))
    cos_c = np.zeros((m + 1, 2))
    sin_c = np.zeros((m + 1, 2))
    for ci, name in enumerate(("x", "y")):
        for k, (a, b) in rows[name].items():
            cos_c[k, ci] = a
            sin_c[k, ci] = b
    return ClosedCurve(cos_c, sin_c)
