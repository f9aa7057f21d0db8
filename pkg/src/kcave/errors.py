"""Exception hierarchy shared across the package."""

from __future__ import annotations


class KCaveError(Exception):
    """Base class for all package errors."""


class ValidationError(KCaveError):
    pass


class ParseError(ValidationError):
    pass


class ArbitrageError(ValidationError):
    pass


class CenteringError(ValidationError):
    pass


class CoverageError(ValidationError):
    pass


class HorizonError(ValidationError):
    pass


class SolverError(KCaveError):
    pass


class InfeasibleError(SolverError):
    pass


class UnboundedError(SolverError):
    pass


class MaxIterationsError(SolverError):
    pass


class SizeError(SolverError):
    pass


class NegativeMassError(SolverError):
    pass


class ShapeError(KCaveError):
    pass


class RegularizationChangedLaw(KCaveError):
    pass


class RuleMismatch(KCaveError):
    pass
