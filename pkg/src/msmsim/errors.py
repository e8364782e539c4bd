"""Exception hierarchy shared by every module."""

from __future__ import annotations


class MsmSimError(Exception):
    """Base class for all package errors."""


class DomainError(MsmSimError, ValueError):
    """An argument or parameter lies outside its admissible domain."""


class ScenarioError(MsmSimError):
    """A scenario file could not be parsed or validated.

    ``line`` and ``column`` are 1-based positions in the source text when the
    problem can be attributed to a location.
    """

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.message = message
        self.line = line
        self.column = column
        super().__init__(str(self))

    def __str__(self) -> str:
        if self.line is None:
            return self.message
        if self.column is None:
            return f"line {self.line}: {self.message}"
        return f"line {self.line}, column {self.column}: {self.message}"


class EvaluationError(MsmSimError, ArithmeticError):
    """An expression could not be evaluated (bad reference, log of <= 0, ...)."""


class SimulationError(MsmSimError):
    """Raised while simulating one individual; ``individual`` is filled in by the cohort driver."""

    individual: int | None = None


class EnsembleExtinctionError(SimulationError):
    """No eligible donor clone remains to replace a failed clone."""


class InfeasibleHazardError(SimulationError):
    """A rescaled failure probability exceeds one."""


class HazardDomainError(SimulationError):
    """An MSM hazard evaluated outside [0, 1] in strict mode."""


class FitError(MsmSimError):
    """Base class for pooled logistic fitting failures."""


class ConvergenceError(FitError):
    pass


class SeparationError(FitError):
    pass


class RankDeficiencyError(FitError):
    pass


class PositivityError(MsmSimError):
    """A treatment probability in a weight denominator is zero."""
