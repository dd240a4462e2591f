"""Experiment configuration, study pipelines and result serialisation.

A single JSON document configures every study; its SHA-256 over the
canonical serialisation identifies runs.  Pipelines are pure functions of
the configuration: node evaluations are independent, scheduled over a
process pool, collected in node order and reduced deterministically, so
outputs are byte-identical for any worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, anatomy, forward_data
from .bie import (
    BoundaryGrid,
    assemble_diag,
    build_system,
    operator_pair,
    solve_forward,
)
from .errors import ConfigError, UniformityError
from .geometry import (
    ClosedCurve,
    TimeCurveFamily,
    family_from_contours,
    fit_fourier,
    interpolate_time,
    read_contour_csv,
)
from .inverse import (
    DEFAULT_LAMBDA,
    DEFAULT_TV_SMOOTHING,
    RegularisationSpec,
    l_curve,
    solve_inverse,
    write_inverse_csv,
    write_lcurve_csv,
)
from .quadrature import (
    DEFAULT_NODE_CAP,
    MomentField,
    QuadratureRule,
    anisotropy_from_eigenvalues,
    halton,
    moments_from_samples,
    sparse_rule,
    write_moments_csv,
    write_rule_csv,
)
from .random_field import (
    CovarianceSpec,
    KLExpansion,
    SpaceTimeGrid,
    build_kl,
    sample_deformation,
    uniformity_check,
    write_kl_csv,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "ResultTable",
    "desk_config",
    "full_config",
    "config_hash",
    "load_config",
    "build_context",
    "StudyContext",
    "ForwardEvaluator",
    "InverseEvaluator",
    "evaluate_rule",
    "run_forward",
    "run_inverse",
    "run_forward_uq",
    "run_inverse_uq",
    "convergence_study",
    "qmc_error_curve",
    "relative_error",
    "kl_build_run",
    "lcurve_study",
]

_GEOMETRY_KINDS = ("builtin", "concentric", "contours")
_QUADRATURE_KINDS = ("halton", "sparse")
_REFERENCE_KINDS = ("self", "sparse")


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one study; JSON-serialisable and hashable."""

    geometry: str = "builtin"
    contours_path: str | None = None
    fit_threshold: float = 1e-3
    n_sigma: int = 100
    n_gamma: int = 100
    n_slices: int = 10
    time_slice: int | None = None
    period_ms: float = anatomy.PERIOD_MS
    correlation_length: float = 50.0
    field_variance: float = 4.0 / 3.0
    kl_tolerance: float = 1e-2
    kl_max_modes: int | None = None
    quadrature: str = "halton"
    qmc_count: int = 4096
    sparse_level: float = 4.0
    node_cap: int = DEFAULT_NODE_CAP
    convergence_reference: str = "self"
    regularisations: tuple[RegularisationSpec, ...] = ()
    noise_variance: float = 1e-8
    seed: int = 0
    lcurve_min: float = 1e-8
    lcurve_max: float = 1.0
    lcurve_count: int = 33
    uniformity_bound: float = 10.0

    def __post_init__(self):
        if self.geometry not in _GEOMETRY_KINDS:
            raise ConfigError(f"geometry must be one of {_GEOMETRY_KINDS}")
        if self.geometry == "contours" and not self.contours_path:
            raise ConfigError("geometry 'contours' needs contours_path")
        if self.quadrature not in _QUADRATURE_KINDS:
            raise ConfigError(f"quadrature must be one of {_QUADRATURE_KINDS}")
        if self.convergence_reference not in _REFERENCE_KINDS:
            raise ConfigError(
                f"convergence_reference must be one of {_REFERENCE_KINDS}"
            )
        for name in ("n_sigma", "n_gamma"):
            n = getattr(self, name)
            if not (isinstance(n, int) and n >= 4 and n % 2 == 0):
                raise ConfigError(f"{name} must be an even integer >= 4")
        if not (isinstance(self.n_slices, int) and self.n_slices >= 1):
            raise ConfigError("n_slices must be a positive integer")
        if self.time_slice is not None and not (
            isinstance(self.time_slice, int) and 0 <= self.time_slice < self.n_slices
        ):
            raise ConfigError("time_slice must be None or in [0, n_slices)")
        for name in (
            "fit_threshold",
            "period_ms",
            "correlation_length",
            "field_variance",
            "kl_tolerance",
            "lcurve_min",
            "lcurve_max",
        ):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.kl_max_modes is not None and self.kl_max_modes < 1:
            raise ConfigError("kl_max_modes must be None or >= 1")
        if self.qmc_count < 1 or self.node_cap < 1:
            raise ConfigError("qmc_count and node_cap must be positive")
        if self.sparse_level < 0:
            raise ConfigError("sparse_level must be >= 0")
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be nonnegative")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            raise ConfigError("seed must be a nonnegative integer")
        if self.lcurve_count < 3 or self.lcurve_min >= self.lcurve_max:
            raise ConfigError("lcurve grid must be increasing with >= 3 points")
        if not self.uniformity_bound > 1:
            raise ConfigError("uniformity_bound must exceed 1")
        object.__setattr__(self, "regularisations", tuple(self.regularisations))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["regularisations"] = [
            {"kind": r.kind, "lambda": r.lam, "beta": r.beta}
            for r in self.regularisations
        ]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = dict(data)
        regs = []
        for entry in kwargs.pop("regularisations", []):
            if not isinstance(entry, dict) or "kind" not in entry:
                raise ConfigError("each regularisation needs at least a 'kind'")
            extra = set(entry) - {"kind", "lambda", "beta"}
            if extra:
                raise ConfigError(f"unknown regularisation keys: {sorted(extra)}")
            try:
                regs.append(
                    RegularisationSpec(
                        kind=entry["kind"],
                        lam=float(entry.get("lambda", DEFAULT_LAMBDA.get(entry["kind"], 0.0))),
                        beta=float(entry.get("beta", DEFAULT_TV_SMOOTHING)),
                    )
                )
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        try:
            return cls(regularisations=tuple(regs), **kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def desk_config() -> ExperimentConfig:
    """Workstation-scale defaults; every acceptance check runs at this scale."""
    return ExperimentConfig(
        regularisations=tuple(
            RegularisationSpec(kind, DEFAULT_LAMBDA[kind]) for kind in DEFAULT_LAMBDA
        )
    )


def full_config() -> ExperimentConfig:
    """Production-scale defaults; hours of compute, not exercised in CI."""
    return ExperimentConfig(
        n_sigma=500,
        n_gamma=500,
        n_slices=50,
        kl_tolerance=1e-4,
        qmc_count=2**14,
        sparse_level=6.0,
        regularisations=tuple(
            RegularisationSpec(kind, DEFAULT_LAMBDA[kind]) for kind in DEFAULT_LAMBDA
        ),
    )


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON serialisation."""
    canon = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


@dataclass
class ResultTable:
    """Long-format study records plus run metadata.

    Records are (experiment, t_ms, s, quantity, value); appending a
    non-finite value is an error.
    """

    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, experiment: str, t_ms: float, s: float, quantity: str, value: float):
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"non-finite value for {experiment}/{quantity}")
        self.records.append((experiment, float(t_ms), float(s), quantity, value))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["experiment", "t_ms", "s", "quantity", "value"])
            for rec in self.records:
                writer.writerow(
                    [rec[0], repr(rec[1]), repr(rec[2]), rec[3], repr(rec[4])]
                )


# ---------------------------------------------------------------------------
# Study context


@dataclass
class StudyContext:
    """Geometry, data and KL expansion shared by every node of a study."""

    config: ExperimentConfig
    chest_grid: BoundaryGrid
    gamma_self: tuple[np.ndarray, np.ndarray]
    family: TimeCurveFamily
    slices: list[int]
    times: np.ndarray
    s_sigma: np.ndarray
    u_true: np.ndarray  # (n_sel, n_sigma)
    kl: KLExpansion | None


def _load_family(config: ExperimentConfig) -> tuple[ClosedCurve, TimeCurveFamily]:
    if config.geometry == "builtin":
        chest = anatomy.reference_chest()
        acquired = anatomy.reference_heart_family()
        family = interpolate_time(acquired, config.n_slices)
    else:
        inner, chest = anatomy.concentric_circles()
        times = np.arange(config.n_slices) * (config.period_ms / config.n_slices)
        family = TimeCurveFamily((inner,) * config.n_slices, times, config.period_ms)
    return chest, family


def load_contour_case(
    case_dir, config: ExperimentConfig
) -> tuple[ClosedCurve, TimeCurveFamily]:
    """Fit the contour files of a case directory into study geometry.

    The directory must hold ``chest.csv`` (one contour block) and
    ``heart.csv`` (one block per acquired time) in the standard
    t_ms,x_cm,y_cm format; the heart family is interpolated onto the
    configured slice count.
    """
    case_dir = Path(case_dir)
    chest_file = case_dir / "chest.csv"
    heart_file = case_dir / "heart.csv"
    for f in (chest_file, heart_file):
        if not f.is_file():
            raise ConfigError(f"contour case file missing: {f}")
    chest_blocks = read_contour_csv(chest_file)
    if len(chest_blocks) != 1:
        raise ConfigError("chest contour file must hold exactly one block")
    chest = fit_fourier(chest_blocks[0][1], config.fit_threshold)
    heart_blocks = read_contour_csv(heart_file)
    raw = family_from_contours(heart_blocks, config.period_ms, config.fit_threshold)
    return chest, interpolate_time(raw, config.n_slices)


def build_context(config: ExperimentConfig, need_kl: bool = True) -> StudyContext:
    if config.geometry == "contours":
        chest, family = load_contour_case(config.contours_path, config)
    else:
        chest, family = _load_family(config)
    chest_grid = BoundaryGrid.build(chest, config.n_gamma, "outer")
    gamma_self = (assemble_diag("V", chest_grid), assemble_diag("K", chest_grid))
    slices = (
        list(range(config.n_slices))
        if config.time_slice is None
        else [config.time_slice]
    )
    times = family.times[slices]
    s_sigma = np.arange(config.n_sigma) / config.n_sigma
    u_true = np.stack(
        [
            forward_data.pericardial_potential(s_sigma, t, config.period_ms)
            for t in times
        ]
    )
    kl = None
    if need_kl:
        grid = SpaceTimeGrid.from_family(family, config.n_sigma, slices)
        spec = CovarianceSpec(
            correlation_length=config.correlation_length,
            variance=config.field_variance,
            period=config.period_ms,
        )
        kl = build_kl(grid, spec, config.kl_tolerance, config.kl_max_modes)
    return StudyContext(
        config=config,
        chest_grid=chest_grid,
        gamma_self=gamma_self,
        family=family,
        slices=slices,
        times=times,
        s_sigma=s_sigma,
        u_true=u_true,
        kl=kl,
    )


# ---------------------------------------------------------------------------
# Node evaluators (picklable, pure)


@dataclass
class ForwardEvaluator:
    """Chest traces over the selected slices for one parameter vector."""

    kl: KLExpansion
    u_true: np.ndarray
    chest_grid: BoundaryGrid
    gamma_self: tuple[np.ndarray, np.ndarray]
    n_sigma: int
    uniformity_bound: float

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        out = []
        for j in range(self.kl.grid.n_slices):
            ops = self._operators(xi, j)
            out.append(solve_forward(ops, self.u_true[j]).chest)
        return np.concatenate(out)

    def _operators(self, xi, j):
        pts = sample_deformation(self.kl, xi, j)
        report = uniformity_check(
            pts,
            self.kl.grid.points[j],
            self.chest_grid.points,
            self.chest_grid.diameter,
            self.uniformity_bound,
        )
        if report is not None:
            node = np.array2string(np.asarray(xi, float), precision=4, threshold=8)
            detail = f"{report.detail} at node xi = {node}".strip()
            raise UniformityError(report.kind, report.indices, detail)
        curve = ClosedCurve.from_uniform_samples(pts)
        sigma_grid = BoundaryGrid.build(curve, self.n_sigma, "inner")
        return build_system(sigma_grid, self.chest_grid, self.gamma_self)


@dataclass
class InverseEvaluator:
    """Reconstructions for every configured regulariser, concatenated.

    Output layout: kinds vary slowest, then slices, then boundary nodes.
    The chest data is fixed across nodes; only the geometry moves.
    """

    forward: ForwardEvaluator
    y_data: np.ndarray  # (n_sel, n_gamma)
    specs: tuple[RegularisationSpec, ...]

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        per_kind = [[] for _ in self.specs]
        for j in range(self.forward.kl.grid.n_slices):
            ops = self.forward._operators(xi, j)
            a, b = operator_pair(ops)
            for q, spec in enumerate(self.specs):
                sol = solve_inverse(
                    a, ops.mass_gamma, self.y_data[j], spec, ops.mass_sigma, dtn=b
                )
                per_kind[q].append(sol.u)
        return np.concatenate([np.concatenate(v) for v in per_kind])


def reference_operators(context: StudyContext, j: int):
    """Operators on the undeformed slice geometry."""
    grid = BoundaryGrid.build(
        context.family.curves[context.slices[j]], context.config.n_sigma, "inner"
    )
    return build_system(grid, context.chest_grid, context.gamma_self)


def noisy_chest_data(context: StudyContext) -> np.ndarray:
    """Reference forward traces per slice plus seeded measurement noise."""
    clean = np.stack(
        [
            solve_forward(reference_operators(context, j), context.u_true[j]).chest
            for j in range(len(context.slices))
        ]
    )
    return forward_data.add_noise(
        clean, context.config.noise_variance, context.config.seed
    )


def study_rule(config: ExperimentConfig, kl: KLExpansion) -> QuadratureRule:
    if config.quadrature == "halton":
        return halton(kl.rank, config.qmc_count)
    weights = anisotropy_from_eigenvalues(kl.eigenvalues)
    return sparse_rule(kl.rank, weights, config.sparse_level, config.node_cap)


def evaluate_rule(evaluator, rule: QuadratureRule, threads: int = 1) -> np.ndarray:
    """Evaluate all nodes, in node order, optionally over a process pool."""
    nodes = [rule.nodes[i] for i in range(rule.count)]
    if threads <= 1:
        rows = [evaluator(x) for x in nodes]
    else:
        chunk = max(1, rule.count // (threads * 16))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(evaluator, nodes, chunksize=chunk))
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# Pipelines


def _write_meta(out_dir: Path, config: ExperimentConfig, threads: int, runtime: float, extras: dict):
    meta = {
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "seed": config.seed,
        "threads": threads,
        "runtime_seconds": runtime,
        "versions": {
            "ecguq": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    meta.update(extras)
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_trace_csv(path, times, s_vals, traces, value_name: str):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_ms", "s", value_name])
        for t, row in zip(times, traces):
            for s, v in zip(s_vals, row):
                writer.writerow([repr(float(t)), repr(float(s)), repr(float(v))])


def run_forward(config: ExperimentConfig, out_dir=None) -> ResultTable:
    """Forward solves on the reference geometry, one per selected slice."""
    start = time.perf_counter()
    context = build_context(config, need_kl=False)
    s_gamma = np.arange(config.n_gamma) / config.n_gamma
    table = ResultTable(metadata={"command": "forward"})
    traces = []
    for j, t in enumerate(context.times):
        sol = solve_forward(reference_operators(context, j), context.u_true[j])
        traces.append(sol.chest)
        for s, v in zip(s_gamma, sol.chest):
            table.append("forward", t, s, "chest_potential", v)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_trace_csv(out_dir / "chest.csv", context.times, s_gamma, traces, "y_value")
        _write_meta(
            out_dir, config, 1, time.perf_counter() - start, {"command": "forward"}
        )
    return table


def run_inverse(config: ExperimentConfig, out_dir=None) -> dict:
    """Reconstructions from noisy reference-geometry data, per slice and kind."""
    start = time.perf_counter()
    if not config.regularisations:
        raise ConfigError("inverse study needs at least one regularisation")
    context = build_context(config, need_kl=False)
    y_data = noisy_chest_data(context)
    results: dict[str, list] = {spec.kind: [] for spec in config.regularisations}
    stationarity: dict[str, float] = {}
    for j, t in enumerate(context.times):
        ops = reference_operators(context, j)
        a, b = operator_pair(ops)
        for spec in config.regularisations:
            sol = solve_inverse(
                a, ops.mass_gamma, y_data[j], spec, ops.mass_sigma, dtn=b
            )
            results[spec.kind].append((float(t), context.s_sigma, sol.u))
            stationarity[spec.kind] = max(
                stationarity.get(spec.kind, 0.0), sol.diagnostics["stationarity"]
            )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for kind, rows in results.items():
            write_inverse_csv(out_dir / f"inverse_{kind}.csv", rows)
        signal_power = float(np.mean(y_data**2))
        extras = {
            "command": "inverse",
            "stationarity": stationarity,
            "snr_db": (
                10.0 * float(np.log10(signal_power / config.noise_variance))
                if config.noise_variance > 0
                else None
            ),
        }
        _write_meta(out_dir, config, 1, time.perf_counter() - start, extras)
    return results


def _split_moments(mf: MomentField, n_groups: int) -> list[MomentField]:
    parts = []
    for k in range(n_groups):
        sl = slice(k * mf.m1.size // n_groups, (k + 1) * mf.m1.size // n_groups)
        parts.append(
            MomentField(
                mf.m1[sl], mf.m2[sl], mf.variance[sl], mf.clamped[sl], mf.provenance
            )
        )
    return parts


def run_forward_uq(config: ExperimentConfig, out_dir=None, threads: int = 1) -> dict:
    """Propagate boundary shape uncertainty through the forward map."""
    start = time.perf_counter()
    context = build_context(config)
    evaluator = ForwardEvaluator(
        kl=context.kl,
        u_true=context.u_true,
        chest_grid=context.chest_grid,
        gamma_self=context.gamma_self,
        n_sigma=config.n_sigma,
        uniformity_bound=config.uniformity_bound,
    )
    rule = study_rule(config, context.kl)
    values = evaluate_rule(evaluator, rule, threads)
    moments = moments_from_samples(values, rule.weights, rule.provenance)
    reference = np.stack(
        [
            solve_forward(reference_operators(context, j), context.u_true[j]).chest
            for j in range(len(context.slices))
        ]
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        per_slice = _split_moments(moments, len(context.slices))
        write_moments_csv(
            out_dir / "moments.csv",
            [(context.slices[j], per_slice[j]) for j in range(len(context.slices))],
        )
        s_gamma = np.arange(config.n_gamma) / config.n_gamma
        _write_trace_csv(
            out_dir / "reference.csv", context.times, s_gamma, reference, "y_value"
        )
        write_rule_csv(out_dir / "rule.csv", rule)
        _write_meta(
            out_dir,
            config,
            threads,
            time.perf_counter() - start,
            {
                "command": "uq-forward",
                "kl_rank": int(context.kl.rank),
                "kl_trace_residual": context.kl.trace_residual,
                "nodes": int(rule.count),
            },
        )
    return {
        "context": context,
        "rule": rule,
        "values": values,
        "moments": moments,
        "reference": reference,
    }


def run_inverse_uq(config: ExperimentConfig, out_dir=None, threads: int = 1) -> dict:
    """Propagate boundary shape uncertainty through the regularised inverse maps."""
    start = time.perf_counter()
    if not config.regularisations:
        raise ConfigError("inverse study needs at least one regularisation")
    context = build_context(config)
    y_data = noisy_chest_data(context)
    fwd = ForwardEvaluator(
        kl=context.kl,
        u_true=context.u_true,
        chest_grid=context.chest_grid,
        gamma_self=context.gamma_self,
        n_sigma=config.n_sigma,
        uniformity_bound=config.uniformity_bound,
    )
    evaluator = InverseEvaluator(fwd, y_data, tuple(config.regularisations))
    rule = study_rule(config, context.kl)
    values = evaluate_rule(evaluator, rule, threads)
    moments = moments_from_samples(values, rule.weights, rule.provenance)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        n_sel = len(context.slices)
        per_kind = _split_moments(moments, len(config.regularisations))
        for q, spec in enumerate(config.regularisations):
            write_moments_csv(
                out_dir / f"moments_{spec.kind}.csv",
                [
                    (context.slices[j], mf)
                    for j, mf in enumerate(_split_moments(per_kind[q], n_sel))
                ],
            )
        write_rule_csv(out_dir / "rule.csv", rule)
        _write_meta(
            out_dir,
            config,
            threads,
            time.perf_counter() - start,
            {
                "command": "uq-inverse",
                "kl_rank": int(context.kl.rank),
                "nodes": int(rule.count),
            },
        )
    return {
        "context": context,
        "rule": rule,
        "values": values,
        "moments": moments,
        "y_data": y_data,
    }


def relative_error(approx: np.ndarray, exact: np.ndarray, weights: np.ndarray) -> float:
    """Relative discrepancy in the weighted L2 norm; scale-invariant."""
    num = np.sqrt(np.sum(weights * (approx - exact) ** 2))
    den = np.sqrt(np.sum(weights * exact**2))
    if den == 0.0:
        return float(num)
    return float(num / den)


def qmc_error_curve(
    values: np.ndarray,
    weights_field: np.ndarray,
    n_list: list[int],
    reference: MomentField | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Prefix-rule moment errors against a reference.

    ``values`` holds node evaluations of a Halton rule in node order;
    prefix N uses the first N rows with uniform weights.  Errors are
    relative weighted-L2 discrepancies of M1 and M2.  Without an explicit
    ``reference`` the full-length rule provides it and every prefix must
    stay strictly shorter; passing the moments of an independent rule
    (cross-method comparison) lets the longest prefix use all rows.
    """
    n_total = values.shape[0]
    if reference is None:
        if max(n_list) >= n_total:
            raise ValueError("prefix sizes must stay below the reference size")
        reference = moments_from_samples(
            values, np.full(n_total, 1.0 / n_total), "reference"
        )
    elif max(n_list) > n_total:
        raise ValueError("prefix sizes exceed the available evaluations")
    ref = reference
    e1, e2 = [], []
    for n in n_list:
        mf = moments_from_samples(values[:n], np.full(n, 1.0 / n), f"prefix({n})")
        e1.append(relative_error(mf.m1, ref.m1, weights_field))
        e2.append(relative_error(mf.m2, ref.m2, weights_field))
    return np.asarray(e1), np.asarray(e2)


def _field_weights(context: StudyContext, target: str, n_kinds: int = 1) -> np.ndarray:
    """Mass weights matching the concatenated evaluator output."""
    if target == "forward":
        per_slice = np.tile(context.chest_grid.speed / context.chest_grid.n, len(context.slices))
        return per_slice
    sigma_mass = np.concatenate(
        [
            BoundaryGrid.build(
                context.family.curves[j], context.config.n_sigma, "inner"
            ).speed
            / context.config.n_sigma
            for j in context.slices
        ]
    )
    return np.tile(sigma_mass, n_kinds)


def default_prefix_sizes(reference: int) -> list[int]:
    sizes = []
    n = 128
    while n * 2 <= reference:
        sizes.append(n)
        n *= 2
    if not sizes:
        raise ConfigError("qmc_count too small for a convergence study")
    return sizes


def convergence_study(config: ExperimentConfig, out_dir=None, threads: int = 1) -> dict:
    """Quadrature convergence tables for the forward and inverse studies.

    With Halton quadrature the study reports prefix-rule errors, by default
    against the full configured rule; ``convergence_reference = "sparse"``
    instead measures every prefix (including the full rule) against the
    sparse rule at the configured level, so the table records the
    discrepancy between the two quadrature methods.  With sparse
    quadrature it reports sparse-rule errors at increasing levels against
    a Halton reference of the configured size.
    """
    start = time.perf_counter()
    context = build_context(config)
    fwd = ForwardEvaluator(
        kl=context.kl,
        u_true=context.u_true,
        chest_grid=context.chest_grid,
        gamma_self=context.gamma_self,
        n_sigma=config.n_sigma,
        uniformity_bound=config.uniformity_bound,
    )
    evaluators: dict[str, object] = {"forward": fwd}
    if config.regularisations:
        y_data = noisy_chest_data(context)
        evaluators["inverse"] = InverseEvaluator(
            fwd, y_data, tuple(config.regularisations)
        )
    tables: dict[str, np.ndarray] = {}
    ref_rule = halton(context.kl.rank, config.qmc_count)

    def split(target: str, values: np.ndarray) -> dict[str, np.ndarray]:
        if target == "forward":
            return {"forward": values}
        block = values.shape[1] // len(config.regularisations)
        return {
            spec.kind: values[:, q * block : (q + 1) * block]
            for q, spec in enumerate(config.regularisations)
        }

    cross_rule = None
    if config.quadrature == "halton" and config.convergence_reference == "sparse":
        cross_rule = sparse_rule(
            context.kl.rank,
            anisotropy_from_eigenvalues(context.kl.eigenvalues),
            config.sparse_level,
            config.node_cap,
        )
    for target, evaluator in evaluators.items():
        weights = _field_weights(context, target)
        ref_values = evaluate_rule(evaluator, ref_rule, threads)
        groups = split(target, ref_values)
        if config.quadrature == "halton":
            n_list = default_prefix_sizes(config.qmc_count)
            cross_refs = None
            if cross_rule is not None:
                n_list = n_list + [config.qmc_count]
                cross_groups = split(
                    target, evaluate_rule(evaluator, cross_rule, threads)
                )
                cross_refs = {
                    name: moments_from_samples(
                        vals, cross_rule.weights, cross_rule.provenance
                    )
                    for name, vals in cross_groups.items()
                }
            for name, vals in groups.items():
                e1, e2 = qmc_error_curve(
                    vals,
                    weights,
                    n_list,
                    reference=None if cross_refs is None else cross_refs[name],
                )
                tables[name] = np.column_stack([n_list, e1, e2])
        else:
            refs = {
                name: moments_from_samples(vals, ref_rule.weights, ref_rule.provenance)
                for name, vals in groups.items()
            }
            aniso = anisotropy_from_eigenvalues(context.kl.eigenvalues)
            rows: dict[str, list] = {name: [] for name in groups}
            for level in range(int(config.sparse_level) + 1):
                rule = sparse_rule(
                    context.kl.rank, aniso, float(level), config.node_cap
                )
                level_groups = split(target, evaluate_rule(evaluator, rule, threads))
                for name, sv in level_groups.items():
                    mf = moments_from_samples(sv, rule.weights, rule.provenance)
                    rows[name].append(
                        [
                            rule.count,
                            relative_error(mf.m1, refs[name].m1, weights),
                            relative_error(mf.m2, refs[name].m2, weights),
                        ]
                    )
            for name in groups:
                tables[name] = np.asarray(rows[name])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, tab in tables.items():
            with open(out_dir / f"converge_{name}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["N", "M1", "M2"])
                for row in tab:
                    writer.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2]))])
        _write_meta(
            out_dir,
            config,
            threads,
            time.perf_counter() - start,
            {"command": "converge", "kl_rank": int(context.kl.rank)},
        )
    return {"context": context, "tables": tables}


def kl_build_run(config: ExperimentConfig, out_dir=None) -> KLExpansion:
    """Build and export the KL expansion for the configured geometry."""
    start = time.perf_counter()
    context = build_context(config)
    kl = context.kl
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_kl_csv(out_dir / "kl.csv", kl)
        _write_meta(
            out_dir,
            config,
            1,
            time.perf_counter() - start,
            {
                "command": "kl-build",
                "kl_rank": int(kl.rank),
                "kl_trace_residual": kl.trace_residual,
                "eigenvalues": [float(v) for v in kl.eigenvalues],
            },
        )
    return kl


def lcurve_study(config: ExperimentConfig, out_dir=None) -> dict:
    """L-curve sweeps per kind; the reported weight is the maximum over slices."""
    start = time.perf_counter()
    if not config.regularisations:
        raise ConfigError("lcurve study needs at least one regularisation")
    context = build_context(config, need_kl=False)
    y_data = noisy_chest_data(context)
    grid = np.logspace(
        np.log10(config.lcurve_min), np.log10(config.lcurve_max), config.lcurve_count
    )
    out: dict[str, dict] = {}
    for spec in config.regularisations:
        per_slice = []
        traces = []
        for j in range(len(context.slices)):
            ops = reference_operators(context, j)
            a, b = operator_pair(ops)
            result = l_curve(
                a,
                ops.mass_gamma,
                y_data[j],
                spec.kind,
                ops.mass_sigma,
                dtn=b,
                lambdas=grid,
                beta=spec.beta,
            )
            per_slice.append(result.lambda_opt)
            traces.append(result)
        pick = int(np.argmax(per_slice))
        out[spec.kind] = {
            "lambda_opt": float(per_slice[pick]),
            "per_slice": [float(v) for v in per_slice],
            "corner_found": bool(traces[pick].corner_found),
            "trace": traces[pick],
        }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for kind, res in out.items():
            write_lcurve_csv(out_dir / f"lcurve_{kind}.csv", res["trace"])
        _write_meta(
            out_dir,
            config,
            1,
            time.perf_counter() - start,
            {
                "command": "lcurve",
                "lambda_opt": {k: v["lambda_opt"] for k, v in out.items()},
                "corner_found": {k: v["corner_found"] for k, v in out.items()},
            },
        )
    return out
