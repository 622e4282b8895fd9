"""Exception hierarchy.

Errors split into two families so the CLI can map them onto exit codes:
``UsageError`` subclasses are bad input (exit 2), ``NumericalError``
subclasses are failures of the numerics on otherwise valid input (exit 3).
"""

from __future__ import annotations


class CurveEquivError(Exception):
    """Base class for all package errors."""


class UsageError(CurveEquivError, ValueError):
    """Invalid input or configuration."""


class NumericalError(CurveEquivError, ArithmeticError):
    """A numerical procedure failed on valid input."""


class DimensionMismatch(UsageError):
    pass


class DomainError(UsageError):
    pass


class DuplicateId(UsageError):
    pass


class ModelNotFound(UsageError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else "model not found"


class ParseError(UsageError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmptyGroup(UsageError):
    pass


class DegenerateAllocation(UsageError):
    pass


class EmptyStats(UsageError):
    pass


class NonConvergence(NumericalError):
    pass


class SingularInformation(NumericalError):
    pass


class ConstraintInfeasible(NumericalError):
    pass


class NonUniqueExtremum(NumericalError):
    pass


class DroppedReplicates(NumericalError):
    """Too many bootstrap replications failed to refit."""
