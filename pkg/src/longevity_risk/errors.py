"""Exception hierarchy shared by every stage of the pipeline.

Validation failures derive from ``ValueError`` so that callers catching the
built-in type keep working; the CLI maps each class to an exit code.
"""

from typing import Any, Iterable, Sequence


class LongevityRiskError(Exception):
    """Base class for all errors raised by the package."""


class StructuralError(LongevityRiskError, ValueError):
    """Input grid is malformed: missing, duplicated or misaligned cells."""

    def __init__(self, message: str, cells: Iterable[tuple[int, int]] = ()) -> None:
        super().__init__(message)
        self.cells = list(cells)


class DomainError(LongevityRiskError, ValueError):
    """A value lies outside the domain of the operation."""

    def __init__(self, message: str, cells: Iterable[tuple[int, int]] = ()) -> None:
        super().__init__(message)
        self.cells = list(cells)


class ArgumentError(LongevityRiskError, ValueError):
    """An argument violates a documented precondition."""


class CoverageError(LongevityRiskError, ValueError):
    """The mortality table does not cover some annuitants' cohort diagonals."""

    def __init__(self, message: str, annuitant_ids: Sequence[str] = ()) -> None:
        super().__init__(message)
        self.annuitant_ids = list(annuitant_ids)


class DegeneracyError(LongevityRiskError, ValueError):
    """The input carries no information for the requested quantity."""


class NumericError(LongevityRiskError, ArithmeticError):
    """A numerical factorization or evaluation failed."""


class ConvergenceError(LongevityRiskError, RuntimeError):
    """An iterative procedure stopped before meeting its criterion."""

    def __init__(self, message: str, trace: Sequence[dict[str, Any]] = ()) -> None:
        super().__init__(message)
        self.trace = list(trace)


class InvariantError(LongevityRiskError, AssertionError):
    """An internal post-condition does not hold."""
