"""Quadrature on the parameter cube [-1, 1]^K for shape-uncertainty studies.

Two families: unscrambled Halton points with uniform weights (their prefix
property makes nested convergence studies cheap) and anisotropic
Smolyak-type sparse grids built from 1D Gauss-Legendre rules, with
dimension weights derived from the decay of KL eigenvalues.  Weights are
normalised so they sum to one, i.e. rules integrate against the uniform
probability measure on the cube.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BudgetError

logger = logging.getLogger(__name__)

__all__ = [
    "QuadratureRule",
    "MomentField",
    "halton",
    "gauss_legendre",
    "anisotropy_from_eigenvalues",
    "sparse_rule",
    "estimate_moments",
    "moments_from_samples",
    "write_rule_csv",
    "write_moments_csv",
]

DEFAULT_NODE_CAP = 1_000_000


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes in [-1, 1]^K with weights summing to one.

    Sparse-grid weights may be negative; Halton weights are uniform.
    """

    nodes: np.ndarray
    weights: np.ndarray
    provenance: str

    def __post_init__(self):
        nodes = np.asarray(self.nodes, float)
        weights = np.asarray(self.weights, float)
        if nodes.ndim != 2 or weights.ndim != 1 or nodes.shape[0] != weights.shape[0]:
            raise ValueError("nodes must be (N, K) with matching (N,) weights")
        if nodes.shape[0] == 0:
            raise ValueError("empty rule")
        if np.abs(nodes).max() > 1.0 + 1e-12:
            raise ValueError("nodes must lie in the closed cube [-1, 1]^K")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def count(self) -> int:
        return self.nodes.shape[0]

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]


def _first_primes(k: int) -> np.ndarray:
    primes = []
    cand = 2
    while len(primes) < k:
        if all(cand % p for p in primes):
            primes.append(cand)
        cand += 1
    return np.asarray(primes)


def _radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    x = np.zeros(indices.shape[0])
    f = 1.0
    idx = indices.copy()
    while idx.any():
        f /= base
        x += f * (idx % base)
        idx //= base
    return x


def halton(dim: int, count: int) -> QuadratureRule:
    """First ``count`` Halton points (index starting at 1, no scrambling).

    Base for dimension k is the k-th prime; the unit-cube points are mapped
    affinely onto [-1, 1]^K and weighted uniformly.  Prefixes of a longer
    rule coincide with the shorter rule, which convergence studies exploit.
    """
    if dim < 1 or count < 1:
        raise ValueError("dim and count must be positive")
    idx = np.arange(1, count + 1, dtype=np.int64)
    cube = np.column_stack([_radical_inverse(idx, int(b)) for b in _first_primes(dim)])
    return QuadratureRule(
        2.0 * cube - 1.0, np.full(count, 1.0 / count), f"halton(dim={dim}, count={count})"
    )


@lru_cache(maxsize=None)
def _gauss_legendre_cached(n: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    x, w = np.polynomial.legendre.leggauss(n)
    return tuple(x), tuple(w / 2.0)


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """1D Gauss-Legendre rule on [-1, 1] against the uniform probability measure."""
    if n < 1:
        raise ValueError("n must be positive")
    x, w = _gauss_legendre_cached(n)
    return np.asarray(x), np.asarray(w)


def anisotropy_from_eigenvalues(eigenvalues: np.ndarray) -> np.ndarray:
    """Dimension weights a_k = max(1, 1 + log2(sqrt(l_1 / l_k))).

    Slowly decaying spectra give near-isotropic weights; fast decay
    deactivates trailing dimensions early.
    """
    lam = np.asarray(eigenvalues, float)
    if lam.ndim != 1 or lam.size == 0 or np.any(lam <= 0):
        raise ValueError("eigenvalues must be a 1D positive array")
    return np.maximum(1.0, 1.0 + 0.5 * np.log2(lam[0] / lam))


def _index_set(a: np.ndarray, level: float, cap: int) -> list[tuple[int, ...]]:
    """All multi-indices nu >= 0 with <a, nu> <= level (active dims only recurse).

    Membership uses the same 1e-12 slack tolerance as the combination
    coefficients; weights that sit exactly on the level boundary (equal
    leading eigenvalues give a_k = 1 up to roundoff) must land on the same
    side in both places or the telescoping coefficients break.
    """
    dim = a.shape[0]
    active = [k for k in range(dim) if a[k] <= level + 1e-12]
    out: list[tuple[int, ...]] = []
    current = [0] * dim

    def rec(pos: int, slack: float) -> None:
        if pos == len(active):
            out.append(tuple(current))
            if len(out) > cap:
                raise BudgetError(f"sparse index set exceeds node cap {cap}")
            return
        k = active[pos]
        top = int(np.floor((slack + 1e-12) / a[k]))
        for nu in range(top + 1):
            current[k] = nu
            rec(pos + 1, slack - nu * a[k])
        current[k] = 0

    rec(0, level)
    return out


def _combination_coefficient(nu: tuple[int, ...], a: np.ndarray, level: float) -> int:
    """c_nu = sum over binary e with <a, nu + e> <= level of (-1)^|e|."""
    slack = level - float(np.dot(a, nu))
    cand = [k for k in range(a.shape[0]) if a[k] <= slack + 1e-12]
    total = 0

    def rec(pos: int, budget: float, parity: int) -> None:
        nonlocal total
        if pos == len(cand):
            total += parity
            return
        rec(pos + 1, budget, parity)
        ak = a[cand[pos]]
        if ak <= budget + 1e-12:
            rec(pos + 1, budget - ak, -parity)

    rec(0, slack, 1)
    return total


def sparse_rule(
    dim: int, anisotropy: np.ndarray, level: float, node_cap: int = DEFAULT_NODE_CAP
) -> QuadratureRule:
    """Anisotropic sparse rule by the combination technique.

    The index set is {nu : <a, nu> <= level}; each retained nu contributes
    the tensor product of 1D Gauss-Legendre rules with nu_k + 1 points,
    scaled by its combination coefficient.  Coinciding nodes (exact float
    matches) are merged.  Exceeding ``node_cap`` raises a budget error
    before any large allocation.
    """
    a = np.asarray(anisotropy, float)
    if a.shape != (dim,):
        raise ValueError("anisotropy must have shape (dim,)")
    if np.any(a <= 0):
        raise ValueError("anisotropy weights must be positive")
    if level < 0:
        raise ValueError("level must be >= 0")
    indices = _index_set(a, level, node_cap)
    coeff = {nu: _combination_coefficient(nu, a, level) for nu in indices}
    live = [(nu, c) for nu, c in coeff.items() if c != 0]
    raw = sum(int(np.prod([n + 1 for n in nu])) for nu, _ in live)
    if raw > node_cap:
        raise BudgetError(f"sparse rule would evaluate {raw} raw nodes, cap {node_cap}")
    merged: dict[tuple[float, ...], float] = {}
    for nu, c in live:
        pts_1d = [gauss_legendre(n + 1)[0] for n in nu]
        wts_1d = [gauss_legendre(n + 1)[1] for n in nu]
        grids = np.meshgrid(*pts_1d, indexing="ij") if dim > 1 else [pts_1d[0]]
        wgrids = np.meshgrid(*wts_1d, indexing="ij") if dim > 1 else [wts_1d[0]]
        nodes = np.stack([g.ravel() for g in grids], axis=1)
        weights = c * np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        for row, w in zip(nodes, weights):
            key = tuple(row)
            merged[key] = merged.get(key, 0.0) + w
    keys = sorted(merged)
    nodes = np.asarray(keys)
    weights = np.asarray([merged[k] for k in keys])
    if abs(weights.sum() - 1.0) > 1e-12:
        raise AssertionError(f"combination weights sum to {weights.sum()!r}")
    logger.debug(
        "sparse_rule: dim = %d, level = %s, |A| = %d, nodes = %d",
        dim, level, len(indices), nodes.shape[0],
    )
    return QuadratureRule(
        nodes, weights, f"sparse(dim={dim}, level={level}, nodes={nodes.shape[0]})"
    )


@dataclass(frozen=True)
class MomentField:
    """First and second moments with the clamped variance.

    ``variance`` is the centred sum of squares, algebraically equal to
    M2 - M1^2 but accurate down to the deterministic limit, clamped at
    zero; ``clamped`` flags entries where the clamp was active (possible
    under signed sparse weights).
    """

    m1: np.ndarray
    m2: np.ndarray
    variance: np.ndarray
    clamped: np.ndarray
    provenance: str


def moments_from_samples(values: np.ndarray, weights: np.ndarray, provenance: str) -> MomentField:
    """Weighted moments accumulated sequentially in node order.

    The fixed accumulation order makes results independent of how node
    evaluations were scheduled.
    """
    values = np.asarray(values, float)
    weights = np.asarray(weights, float)
    if values.ndim != 2 or values.shape[0] != weights.shape[0]:
        raise ValueError("values must be (N, m) with matching weights")
    m1 = np.zeros(values.shape[1])
    m2 = np.zeros(values.shape[1])
    for i in range(values.shape[0]):
        f = values[i]
        m1 += weights[i] * f
        m2 += weights[i] * (f * f)
    # centred second pass: m2 - m1^2 cancels catastrophically when the
    # spread is far below the mean, e.g. in the vanishing-variance limit
    raw = np.zeros(values.shape[1])
    for i in range(values.shape[0]):
        d = values[i] - m1
        raw += weights[i] * (d * d)
    clamped = raw < 0.0
    if clamped.any():
        logger.debug("variance clamped at %d of %d entries", clamped.sum(), raw.size)
    return MomentField(m1, m2, np.where(clamped, 0.0, raw), clamped, provenance)


def estimate_moments(evaluate, rule: QuadratureRule) -> MomentField:
    """Apply ``evaluate`` at every node (in order) and reduce to moments."""
    values = None
    for i in range(rule.count):
        f = np.atleast_1d(np.asarray(evaluate(rule.nodes[i]), float))
        if values is None:
            values = np.empty((rule.count, f.shape[0]))
        values[i] = f
    return moments_from_samples(values, rule.weights, rule.provenance)


def write_rule_csv(path, rule: QuadratureRule) -> None:
    """Dump a rule: header i,w,xi_1,...,xi_K."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "w"] + [f"xi_{k + 1}" for k in range(rule.dim)])
        for i in range(rule.count):
            writer.writerow(
                [i, repr(float(rule.weights[i]))] + [repr(float(v)) for v in rule.nodes[i]]
            )


def write_moments_csv(path, fields: list[tuple[int, MomentField]]) -> None:
    """Write per-slice moment fields: header slice,index,M1,M2,variance,clamped."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slice", "index", "M1", "M2", "variance", "clamped"])
        for slice_id, mf in fields:
            for j in range(mf.m1.shape[0]):
                writer.writerow(
                    [
                        slice_id,
                        j,
                        repr(float(mf.m1[j])),
                        repr(float(mf.m2[j])),
                        repr(float(mf.variance[j])),
                        int(bool(mf.clamped[j])),
                    ]
                )
