"""Error types shared across the package.

The command line maps these onto exit codes: configuration problems exit
with 2, numerical failures with 3 and uniformity violations with 4.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class BudgetError(ConfigError):
    """A requested rule or study would exceed the configured node cap."""


class NumericalError(RuntimeError):
    """Base class for failures of the numerical machinery."""


class SingularSystemError(NumericalError):
    """A linear system was singular to working precision."""

    def __init__(self, message: str, rcond: float | None = None):
        super().__init__(message)
        self.rcond = rcond

    def __reduce__(self):
        return (self.__class__, (self.args[0], self.rcond))


class FitConvergenceError(NumericalError):
    """No Fourier order within the admissible range met the fit threshold."""


class DegenerateCurveError(NumericalError):
    """A curve had a (numerically) vanishing tangent somewhere."""


class NegativePivotError(NumericalError):
    """Pivoted Cholesky met a negative pivot; the kernel is not PSD to roundoff."""

    def __init__(self, message: str, pivot_index: int):
        super().__init__(message)
        self.pivot_index = pivot_index

    def __reduce__(self):
        return (self.__class__, (self.args[0], self.pivot_index))


class UniformityError(RuntimeError):
    """A deformed boundary failed the uniformity check.

    Attributes
    ----------
    kind : str
        One of ``"intersection"``, ``"proximity"``, ``"stretch"``.
    indices : tuple
        Offending point or segment indices.
    """

    def __init__(self, kind: str, indices: tuple, detail: str = ""):
        super().__init__(f"uniformity violation ({kind}) at {indices} {detail}".rstrip())
        self.kind = kind
        self.indices = indices
        self.detail = detail

    def __reduce__(self):
        return (self.__class__, (self.kind, self.indices, self.detail))
