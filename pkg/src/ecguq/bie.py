"""Nystrom discretisation of the annular Laplace boundary-integral system.

The harmonic potential between the chest boundary (outer, fixed) and the
pericardial boundary (inner, moving) is represented through Green's
identity.  Collocating at n uniform parameter nodes per boundary and
applying the periodic trapezoidal rule with a log-singularity splitting
gives dense blocks V (single layer) and K (double layer) that converge
spectrally fast on smooth Fourier boundaries; the log part of the diagonal
blocks uses the classical quadrature correction weights R_j.

Unknowns are the weighted Neumann trace rho1~ = ||g'|| du/dn on the inner
boundary and the Dirichlet trace on the outer boundary.  One LU
factorisation serves every right-hand side; solving against the columns of
the right block yields both the forward solution operator A (pericardial
potential to chest trace) and the Dirichlet-to-Neumann map B.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.linalg.lapack import dgecon

from .errors import DegenerateCurveError, NumericalError, SingularSystemError
from .geometry import ClosedCurve, outward_normal

logger = logging.getLogger(__name__)

__all__ = [
    "BoundaryGrid",
    "DiscreteOperators",
    "ForwardSolution",
    "log_kernel",
    "dlp_kernel",
    "rj_weight",
    "assemble_offdiag",
    "assemble_diag",
    "build_system",
    "solve_forward",
    "operator_pair",
    "solution_operator",
    "poincare_steklov",
    "eval_interior",
    "write_blocks_csv",
]

_RCOND_FLOOR = 1e-14


def log_kernel(x: np.ndarray, xp: np.ndarray) -> np.ndarray:
    """Free-space Green function -log||x - x'|| / (2 pi); errors on coincidence."""
    d = np.asarray(x, float) - np.asarray(xp, float)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r == 0.0):
        raise ValueError("coincident evaluation and source points")
    return -np.log(r) / (2.0 * np.pi)


def dlp_kernel(x: np.ndarray, xp: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Normal derivative of the Green function at the source point.

    Returns <x - x', n'> / (2 pi ||x - x'||^2).
    """
    d = np.asarray(x, float) - np.asarray(xp, float)
    r2 = np.sum(d * d, axis=-1)
    if np.any(r2 == 0.0):
        raise ValueError("coincident evaluation and source points")
    num = np.sum(d * np.asarray(normal, float), axis=-1)
    return num / (2.0 * np.pi * r2)


def rj_weight(i: int, j: int, n: int) -> float:
    """Trapezoidal correction weight R_j(s_i) for the log-singular part.

    Defined for even n = 2m on the uniform grid s_p = p / n:

        R_j(s_i) = -(1/m) [ sum_{k=1}^{m-1} cos(2 pi k (s_i - s_j)) / k
                            + cos(2 pi m (s_i - s_j)) / n ].
    """
    if n % 2 != 0 or n < 2:
        raise ValueError("n must be even and >= 2")
    return float(_rj_row(n)[(i - j) % n])


def _rj_row(n: int) -> np.ndarray:
    """R weights as a circulant generator indexed by (i - j) mod n."""
    m = n // 2
    d = np.arange(n) / n
    k = np.arange(1, m)
    acc = np.cos(2.0 * np.pi * np.outer(d, k)) @ (1.0 / k)
    acc += np.cos(2.0 * np.pi * m * d) / n
    return -acc / m


@dataclass(frozen=True)
class BoundaryGrid:
    """Uniform collocation grid on one boundary with cached frame data.

    ``role`` is ``"inner"`` (pericardium) or ``"outer"`` (chest) and fixes
    the normal orientation: exterior to the annular domain in both cases.
    """

    curve: ClosedCurve
    n: int
    role: str
    s: np.ndarray
    points: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    speed: np.ndarray
    normals: np.ndarray
    diameter: float

    @classmethod
    def build(cls, curve: ClosedCurve, n: int, role: str) -> "BoundaryGrid":
        if n % 2 != 0 or n < 4:
            raise ValueError("n must be even and >= 4")
        if role not in ("inner", "outer"):
            raise ValueError("role must be 'inner' or 'outer'")
        s = np.arange(n) / n
        p, d1, d2 = curve.frames(s)
        speed = np.linalg.norm(d1, axis=1)
        if np.any(speed < 1e-12):
            raise DegenerateCurveError("vanishing tangent on collocation grid")
        nrm = np.column_stack((d1[:, 1], -d1[:, 0])) / speed[:, None]
        sign = 1.0 if curve.signed_area() > 0 else -1.0
        if role == "inner":
            sign = -sign
        diff = p[:, None, :] - p[None, :, :]
        diam = float(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).max()))
        return cls(curve, n, role, s, p, d1, d2, speed, sign * nrm, diam)


def assemble_offdiag(kind: str, target: BoundaryGrid, source: BoundaryGrid) -> np.ndarray:
    """Dense V or K block between two distinct boundaries.

    Entries follow the trapezoidal rule in the source parameter:

        V[i, j] = -log||x_i - y_j||^2 / (4 pi n)
        K[i, j] = <x_i - y_j, n_j> ||g'(r_j)|| / (2 pi n ||x_i - y_j||^2)
    """
    if kind not in ("V", "K"):
        raise ValueError("kind must be 'V' or 'K'")
    if target is source or target.curve is source.curve:
        raise ValueError("off-diagonal assembly needs two distinct boundaries")
    dx = target.points[:, None, :] - source.points[None, :, :]
    r2 = np.sum(dx * dx, axis=2)
    scale = max(target.diameter, source.diameter)
    if r2.min() < (1e-9 * scale) ** 2:
        raise NumericalError(
            f"boundaries touch: min gap {np.sqrt(r2.min()):.3e} below 1e-9 * {scale:.3e}"
        )
    n = source.n
    if kind == "V":
        return -np.log(r2) / (4.0 * np.pi * n)
    num = np.einsum("ijk,jk->ij", dx, source.normals)
    return (num / r2) * (source.speed[None, :] / (2.0 * np.pi * n))


def assemble_diag(kind: str, grid: BoundaryGrid) -> np.ndarray:
    """Dense V or K self-interaction block with desingularised quadrature.

    The single layer splits off the periodic log singularity,

        k1(s, r) = log( ||g(s) - g(r)||^2 / (4 sin^2(pi (s - r))) ),

    whose diagonal limit is 2 log(||g'(r)|| / (2 pi)); the split-off part is
    integrated with the correction weights R_j.  The double layer kernel is
    smooth with diagonal limit <g''(r), n_r> / (2 ||g'(r)||).
    """
    if kind not in ("V", "K"):
        raise ValueError("kind must be 'V' or 'K'")
    n = grid.n
    dx = grid.points[:, None, :] - grid.points[None, :, :]
    r2 = np.sum(dx * dx, axis=2)
    if kind == "V":
        ds = grid.s[:, None] - grid.s[None, :]
        sin2 = 4.0 * np.sin(np.pi * ds) ** 2
        np.fill_diagonal(r2, 1.0)
        np.fill_diagonal(sin2, 1.0)
        k1 = np.log(r2 / sin2)
        np.fill_diagonal(k1, 2.0 * np.log(grid.speed / (2.0 * np.pi)))
        p = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
        r_w = _rj_row(n)[p]
        return -k1 / (4.0 * np.pi * n) - r_w / (4.0 * np.pi)
    num = np.einsum("ijk,jk->ij", dx, grid.normals)
    np.fill_diagonal(r2, 1.0)
    k2 = num / r2
    diag = np.einsum("jk,jk->j", grid.d2, grid.normals) / (2.0 * grid.speed**2)
    np.fill_diagonal(k2, diag)
    return k2 * (grid.speed[None, :] / (2.0 * np.pi * n))


@dataclass
class ForwardSolution:
    """Cauchy data of one forward solve.

    ``u`` is the prescribed pericardial potential, ``chest`` the computed
    chest trace, ``neumann`` the per-point normal derivative du/dn on the
    pericardial boundary (weighted trace divided by ||g'||).
    """

    u: np.ndarray
    chest: np.ndarray
    neumann: np.ndarray


class DiscreteOperators:
    """Assembled blocks, mass weights and the shared LU factorisation.

    Immutable after construction apart from the lazily cached (A, B) pair;
    concurrent solves against the factorisation are safe.
    """

    def __init__(self, sigma: BoundaryGrid, gamma: BoundaryGrid, blocks: dict,
                 lu: tuple, rcond: float):
        self.sigma = sigma
        self.gamma = gamma
        self.blocks = blocks
        self.mass_sigma = sigma.speed / sigma.n
        self.mass_gamma = gamma.speed / gamma.n
        self._lu = lu
        self.rcond = rcond
        self._ab: tuple[np.ndarray, np.ndarray] | None = None
        ns = sigma.n
        self._rhs_cols = np.vstack(
            [0.5 * np.eye(ns) + blocks["K_ss"], -blocks["K_gs"]]
        )

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return lu_solve(self._lu, rhs)


def build_system(
    sigma_grid: BoundaryGrid,
    gamma_grid: BoundaryGrid,
    gamma_self: tuple[np.ndarray, np.ndarray] | None = None,
) -> DiscreteOperators:
    """Assemble all blocks and factorise the left-hand side.

    Parameters
    ----------
    gamma_self : optional
        Precomputed (V, K) self blocks of the fixed outer boundary, reused
        across moving-boundary rebuilds.
    """
    if sigma_grid.role != "inner" or gamma_grid.role != "outer":
        raise ValueError("expected an inner sigma grid and an outer gamma grid")
    if gamma_self is None:
        v_gg = assemble_diag("V", gamma_grid)
        k_gg = assemble_diag("K", gamma_grid)
    else:
        v_gg, k_gg = gamma_self
    blocks = {
        "V_ss": assemble_diag("V", sigma_grid),
        "K_ss": assemble_diag("K", sigma_grid),
        "V_gg": v_gg,
        "K_gg": k_gg,
        "V_sg": assemble_offdiag("V", sigma_grid, gamma_grid),
        "K_sg": assemble_offdiag("K", sigma_grid, gamma_grid),
        "V_gs": assemble_offdiag("V", gamma_grid, sigma_grid),
        "K_gs": assemble_offdiag("K", gamma_grid, sigma_grid),
    }
    ng = gamma_grid.n
    lhs = np.block(
        [
            [blocks["V_ss"], -blocks["K_sg"]],
            [-blocks["V_gs"], 0.5 * np.eye(ng) + blocks["K_gg"]],
        ]
    )
    anorm = np.linalg.norm(lhs, 1)
    lu = lu_factor(lhs, check_finite=False)
    rcond, info = dgecon(lu[0], anorm)
    if info != 0 or not np.isfinite(rcond) or rcond < _RCOND_FLOOR:
        raise SingularSystemError(
            f"block system singular to working precision (rcond = {rcond:.3e})",
            rcond=float(rcond),
        )
    logger.debug("build_system: n = (%d, %d), rcond = %.3e", sigma_grid.n, ng, rcond)
    return DiscreteOperators(sigma_grid, gamma_grid, blocks, lu, float(rcond))


def solve_forward(ops: DiscreteOperators, u: np.ndarray) -> ForwardSolution:
    """Forward solve for one pericardial potential sample vector."""
    u = np.asarray(u, float)
    ns = ops.sigma.n
    if u.shape != (ns,):
        raise ValueError(f"u must have shape ({ns},)")
    sol = ops.solve(ops._rhs_cols @ u)
    return ForwardSolution(u=u, chest=sol[ns:], neumann=sol[:ns] / ops.sigma.speed)


def operator_pair(ops: DiscreteOperators) -> tuple[np.ndarray, np.ndarray]:
    """Forward solution operator A and Dirichlet-to-Neumann map B.

    Both come from one multi-RHS solve against the columns of the right
    block; the result is cached on ``ops``.
    """
    if ops._ab is None:
        ns = ops.sigma.n
        x = ops.solve(ops._rhs_cols)
        a = x[ns:, :].copy()
        b = x[:ns, :] / ops.sigma.speed[:, None]
        ops._ab = (a, b)
    return ops._ab


def solution_operator(ops: DiscreteOperators) -> np.ndarray:
    """Matrix mapping pericardial potential samples to the chest trace."""
    return operator_pair(ops)[0]


def poincare_steklov(ops: DiscreteOperators) -> np.ndarray:
    """Matrix mapping pericardial potential samples to du/dn at the same nodes."""
    return operator_pair(ops)[1]


def eval_interior(ops: DiscreteOperators, solution: ForwardSolution, points: np.ndarray) -> np.ndarray:
    """Evaluate the potential at interior points via the representation formula.

    Each point must keep a distance of at least 2 pi diam / n from either
    boundary, the scale on which the plain trapezoidal rule degrades.
    """
    pts = np.atleast_2d(np.asarray(points, float))
    if pts.shape[1] != 2:
        raise ValueError("points must have shape (m, 2)")
    out = np.zeros(pts.shape[0])
    for grid, rho0, rho1t in (
        (ops.sigma, solution.u, solution.neumann * ops.sigma.speed),
        (ops.gamma, solution.chest, np.zeros(ops.gamma.n)),
    ):
        d = pts[:, None, :] - grid.points[None, :, :]
        r2 = np.sum(d * d, axis=2)
        cutoff = 2.0 * np.pi * grid.diameter / grid.n
        if r2.min() < cutoff**2:
            raise NumericalError(
                f"evaluation point within {cutoff:.3e} of the {grid.role} boundary"
            )
        single = -np.log(r2) / (4.0 * np.pi)
        double = np.sum(d * grid.normals[None, :, :], axis=2) / (2.0 * np.pi * r2)
        out += (single @ rho1t - double @ (rho0 * grid.speed)) / grid.n
    return out


def write_blocks_csv(path, ops: DiscreteOperators) -> None:
    """Debug dump of all assembled blocks: header block,i,j,value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "i", "j", "value"])
        for name in sorted(ops.blocks):
            mat = ops.blocks[name]
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    writer.writerow([name, i, j, repr(float(mat[i, j]))])
