"""Space-time random deformation field of the pericardial boundary.

Displacements act on the two spatial components of the boundary samples.
The covariance is separable: a sine-power kernel in (periodic) time,

    k_t(t, t') = (1 + cos theta) / 2,  theta = arccos(cos(2 pi (t - t') / T)),

times a Matern kernel in space per component, smoothness 5/2 for the x
component and the squared-exponential limit for the y component; the two
components are uncorrelated.  A pivoted Cholesky factorisation of the
covariance over the collocation point set feeds a Karhunen-Loeve
expansion whose parameters are i.i.d. uniform on [-1, 1].
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import NegativePivotError
from .geometry import TimeCurveFamily

logger = logging.getLogger(__name__)

__all__ = [
    "CovarianceSpec",
    "SpaceTimeGrid",
    "KLExpansion",
    "UniformityReport",
    "matern",
    "time_angle",
    "sine_power",
    "covariance",
    "pivoted_cholesky",
    "build_kl",
    "truncate_kl",
    "sample_deformation",
    "uniformity_check",
    "write_kl_csv",
]

# Relative eigenvalue floor below which KL modes are discarded.
_EIG_FLOOR = 1e-14
# Default adjacent-spacing ratio bound of the uniformity check.
DEFAULT_UNIFORMITY_BOUND = 10.0


@dataclass(frozen=True)
class CovarianceSpec:
    """Parameters of the separable displacement covariance.

    ``smoothness`` holds the Matern parameter per spatial component; the
    supported values are 2.5 and inf.
    """

    correlation_length: float = 50.0
    variance: float = 4.0 / 3.0
    period: float = 690.0
    smoothness: tuple[float, float] = (2.5, np.inf)

    def __post_init__(self):
        if not (self.correlation_length > 0 and self.variance > 0 and self.period > 0):
            raise ValueError("correlation_length, variance and period must be positive")
        if len(self.smoothness) != 2 or any(
            nu not in (2.5, np.inf) for nu in self.smoothness
        ):
            raise ValueError("smoothness must pair values from {2.5, inf}")


def matern(d, nu: float, correlation_length: float, variance: float):
    """Matern covariance of distance; supports nu = 5/2 and the limit nu = inf."""
    d = np.asarray(d, float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    rho = correlation_length
    if nu == 2.5:
        q = np.sqrt(5.0) * d / rho
        return variance * (1.0 + q + q * q / 3.0) * np.exp(-q)
    if nu == np.inf:
        return variance * np.exp(-(d * d) / (2.0 * rho * rho))
    raise ValueError("smoothness must be 2.5 or inf")


def time_angle(t, tp, period: float):
    """Geodesic angle between circle embeddings of two times.

    theta = arccos(cos(2 pi (t - t') / T)) in [0, pi].
    """
    t = np.asarray(t, float)
    tp = np.asarray(tp, float)
    eta = 2.0 * np.pi * (t - tp) / period
    return np.arccos(np.clip(np.cos(eta), -1.0, 1.0))


def sine_power(theta):
    """Temporal correlation (1 + cos theta) / 2; exactly rank 3 over a period."""
    return 0.5 * (1.0 + np.cos(np.asarray(theta, float)))


def covariance(point, point_p, spec: CovarianceSpec) -> np.ndarray:
    """Cross-covariance 2x2 matrix of the displacement at two space-time points.

    ``point`` is ((x, y), t).  Components are uncorrelated, so the matrix is
    diagonal with the separable kernel per component.
    """
    (x, t), (xp, tp) = point, point_p
    d = float(np.linalg.norm(np.asarray(x, float) - np.asarray(xp, float)))
    kt = float(sine_power(time_angle(t, tp, spec.period)))
    diag = [
        kt * float(matern(d, nu, spec.correlation_length, spec.variance))
        for nu in spec.smoothness
    ]
    return np.diag(diag)


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Collocation points of the reference inner boundary over chosen slices.

    The flattened point-component ordering is component-major:
    index = c * (n_t * n_s) + j * n_s + i for component c, slice j, node i.
    """

    points: np.ndarray  # (n_t, n_s, 2)
    times: np.ndarray  # (n_t,)
    period: float

    def __post_init__(self):
        pts = np.asarray(self.points, float)
        times = np.asarray(self.times, float)
        if pts.ndim != 3 or pts.shape[2] != 2 or pts.shape[0] != times.shape[0]:
            raise ValueError("points must be (n_t, n_s, 2) matching times")
        pts.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "times", times)

    @property
    def n_slices(self) -> int:
        return self.points.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return 2 * self.n_slices * self.n_nodes

    @classmethod
    def from_family(
        cls, family: TimeCurveFamily, n_nodes: int, slices: list[int] | None = None
    ) -> "SpaceTimeGrid":
        idx = list(range(family.n_slices)) if slices is None else list(slices)
        s = np.arange(n_nodes) / n_nodes
        pts = np.stack([family.curves[j].evaluate(s) for j in idx])
        return cls(pts, family.times[idx], family.period)


def _covariance_column(grid: SpaceTimeGrid, spec: CovarianceSpec, p: int) -> np.ndarray:
    """Column p of the covariance over the flattened point-component set."""
    nt, ns = grid.n_slices, grid.n_nodes
    block = nt * ns
    c, rest = divmod(p, block)
    j, i = divmod(rest, ns)
    x = grid.points[j, i]
    d = np.linalg.norm(grid.points - x, axis=2)  # (nt, ns)
    kt = sine_power(time_angle(grid.times, grid.times[j], grid.period))  # (nt,)
    ks = matern(d, spec.smoothness[c], spec.correlation_length, spec.variance)
    col = np.zeros(2 * block)
    col[c * block : (c + 1) * block] = (kt[:, None] * ks).ravel()
    return col


def pivoted_cholesky(
    get_column, diagonal: np.ndarray, tol: float, max_rank: int | None = None
) -> tuple[np.ndarray, np.ndarray, float]:
    """Greedy pivoted Cholesky with a relative trace stopping criterion.

    Parameters
    ----------
    get_column : callable
        Maps an index p to column p of the symmetric PSD matrix.
    diagonal : ndarray
        The matrix diagonal (evaluated up front; updated in place on a copy).
    tol : float
        Stop once trace(C - L L^T) <= tol * trace(C).
    max_rank : optional
        Hard cap on the number of pivots.

    Returns
    -------
    (L, pivots, relative_residual)
    """
    d = np.array(diagonal, float)
    n = d.shape[0]
    if not tol > 0:
        raise ValueError("tol must be positive")
    trace0 = d.sum()
    if not trace0 > 0:
        raise ValueError("matrix trace must be positive")
    cap = n if max_rank is None else min(n, max_rank)
    cols = np.empty((n, cap))
    pivots = []
    resid = d.sum()
    while resid > tol * trace0 and len(pivots) < cap:
        p = int(np.argmax(d))
        if d[p] <= 0.0:
            raise NegativePivotError(
                f"pivot {len(pivots)} at index {p} is nonpositive ({d[p]:.3e})", p
            )
        k = len(pivots)
        col = get_column(p)
        if k > 0:
            col = col - cols[:, :k] @ cols[p, :k]
        ell = col / np.sqrt(d[p])
        cols[:, k] = ell
        d -= ell * ell
        d[p] = 0.0
        pivots.append(p)
        resid = d.sum()
    rel = float(resid / trace0)
    logger.debug("pivoted_cholesky: rank %d, relative trace residual %.3e", len(pivots), rel)
    return cols[:, : len(pivots)].copy(), np.asarray(pivots), rel


@dataclass(frozen=True)
class KLExpansion:
    """Karhunen-Loeve modes of the displacement field on a space-time grid.

    ``weighted_modes[k]`` is sqrt(l_k) times the orthonormal mode, shaped
    like the grid points; sampling with parameters xi in [-1, 1]^K gives
    displaced points  mean + sum_k xi_k weighted_modes[k].
    """

    eigenvalues: np.ndarray  # (K,), descending
    weighted_modes: np.ndarray  # (K, n_t, n_s, 2)
    grid: SpaceTimeGrid
    pivots: np.ndarray
    trace_residual: float

    @property
    def rank(self) -> int:
        return self.eigenvalues.shape[0]


def build_kl(
    grid: SpaceTimeGrid,
    spec: CovarianceSpec,
    tol: float,
    max_modes: int | None = None,
) -> KLExpansion:
    """Factorise the covariance over the grid and convert to KL modes.

    The Gram matrix L^T L of the pivoted Cholesky factor is diagonalised;
    modes with eigenvalues below a relative floor are dropped, then the
    expansion is truncated to ``max_modes`` leading modes if requested.
    """
    n = grid.size
    diag = np.full(n, spec.variance)
    factor, pivots, resid = pivoted_cholesky(
        lambda p: _covariance_column(grid, spec, p), diag, tol
    )
    gram = factor.T @ factor
    lam, vec = np.linalg.eigh(gram)
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    vec = vec[:, order]
    keep = lam > _EIG_FLOOR * lam[0]
    lam, vec = lam[keep], vec[:, keep]
    weighted = (factor @ vec).T  # rows are sqrt(l_k) * mode_k
    if max_modes is not None and weighted.shape[0] > max_modes:
        lam = lam[:max_modes]
        weighted = weighted[:max_modes]
    nt, ns = grid.n_slices, grid.n_nodes
    modes = weighted.reshape(-1, 2, nt, ns).transpose(0, 2, 3, 1)
    logger.info(
        "KL expansion: %d modes, leading eigenvalue %.4e, trace residual %.3e",
        lam.shape[0], lam[0], resid,
    )
    return KLExpansion(lam, np.ascontiguousarray(modes), grid, pivots, resid)


def truncate_kl(kl: KLExpansion, k: int) -> KLExpansion:
    """Keep the k leading modes."""
    if not 1 <= k <= kl.rank:
        raise ValueError(f"k must be in [1, {kl.rank}]")
    return KLExpansion(
        kl.eigenvalues[:k], kl.weighted_modes[:k], kl.grid, kl.pivots, kl.trace_residual
    )


def sample_deformation(kl: KLExpansion, xi: np.ndarray, slice_index: int) -> np.ndarray:
    """Displaced boundary samples for one parameter vector and time slice."""
    xi = np.asarray(xi, float)
    if xi.shape != (kl.rank,):
        raise ValueError(f"xi must have shape ({kl.rank},)")
    if np.abs(xi).max() > 1.0 + 1e-12:
        raise ValueError("parameters must lie in [-1, 1]")
    if not 0 <= slice_index < kl.grid.n_slices:
        raise ValueError("slice_index out of range")
    return kl.grid.points[slice_index] + np.tensordot(
        xi, kl.weighted_modes[:, slice_index], axes=1
    )


@dataclass(frozen=True)
class UniformityReport:
    """Outcome of a failed uniformity check."""

    kind: str  # "intersection" | "proximity" | "stretch"
    indices: tuple
    detail: str


def _cross(o, a, b):
    return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (
        a[..., 1] - o[..., 1]
    ) * (b[..., 0] - o[..., 0])


def _self_intersection(points: np.ndarray) -> tuple | None:
    """First properly crossing pair of non-adjacent closed-polyline segments."""
    n = points.shape[0]
    a = points
    b = np.roll(points, -1, axis=0)
    i_idx, j_idx = np.triu_indices(n, 2)
    wrap = (i_idx == 0) & (j_idx == n - 1)
    i_idx, j_idx = i_idx[~wrap], j_idx[~wrap]
    d1 = _cross(a[i_idx], b[i_idx], a[j_idx])
    d2 = _cross(a[i_idx], b[i_idx], b[j_idx])
    d3 = _cross(a[j_idx], b[j_idx], a[i_idx])
    d4 = _cross(a[j_idx], b[j_idx], b[i_idx])
    hit = (d1 * d2 < 0) & (d3 * d4 < 0)
    if hit.any():
        w = int(np.argmax(hit))
        return int(i_idx[w]), int(j_idx[w])
    return None


def uniformity_check(
    deformed: np.ndarray,
    reference: np.ndarray,
    chest_points: np.ndarray,
    chest_diameter: float,
    ratio_bound: float = DEFAULT_UNIFORMITY_BOUND,
) -> UniformityReport | None:
    """Validate a deformed boundary polyline against the admissibility rules.

    Checks, in order: the closed polyline is simple; every node keeps a
    distance of more than 1e-2 times the chest diameter from the chest
    samples; adjacent point spacings stay within ``ratio_bound`` of the
    reference spacings.  Returns None when admissible.
    """
    deformed = np.asarray(deformed, float)
    reference = np.asarray(reference, float)
    if deformed.shape != reference.shape or deformed.ndim != 2 or deformed.shape[1] != 2:
        raise ValueError("deformed and reference must be matching (n, 2) arrays")
    pair = _self_intersection(deformed)
    if pair is not None:
        return UniformityReport("intersection", pair, "segments cross")
    dist = cdist(deformed, np.asarray(chest_points, float))
    limit = 1e-2 * chest_diameter
    if dist.min() <= limit:
        w = np.unravel_index(int(np.argmin(dist)), dist.shape)
        return UniformityReport(
            "proximity", (int(w[0]), int(w[1])), f"gap {dist.min():.3e} <= {limit:.3e}"
        )
    gap_d = np.linalg.norm(np.roll(deformed, -1, 0) - deformed, axis=1)
    gap_r = np.linalg.norm(np.roll(reference, -1, 0) - reference, axis=1)
    ratio = gap_d / gap_r
    bad = (ratio > ratio_bound) | (ratio < 1.0 / ratio_bound)
    if bad.any():
        w = int(np.argmax(bad))
        return UniformityReport("stretch", (w,), f"spacing ratio {ratio[w]:.3e}")
    return None


def write_kl_csv(path, kl: KLExpansion) -> None:
    """Export orthonormal mode samples: header k,lambda,slice,index,component,mode_value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "lambda", "slice", "index", "component", "mode_value"])
        for k in range(kl.rank):
            lam = kl.eigenvalues[k]
            root = np.sqrt(lam)
            for j in range(kl.grid.n_slices):
                for i in range(kl.grid.n_nodes):
                    for c in range(2):
                        writer.writerow(
                            [
                                k,
                                repr(float(lam)),
                                j,
                                i,
                                c,
                                repr(float(kl.weighted_modes[k, j, i, c] / root)),
                            ]
                        )
