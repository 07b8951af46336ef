"""Exception hierarchy.

Validation problems derive from :class:`ValidationError` (CLI exit code 2),
numerical failures from :class:`NumericalError` (CLI exit code 3).
"""


class FppebootError(Exception):
    """Base class for all package errors."""


class ValidationError(FppebootError, ValueError):
    pass


class NumericalError(FppebootError, ArithmeticError):
    pass


class NonPositiveBeta(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class DimensionMismatch(ValidationError):
    pass


class GenerationFailed(NumericalError):
    pass


class NotConverged(NumericalError):
    """Solver stopped before reaching its gap target.

    The best iterate and the achieved gap are attached so callers can decide
    whether to keep it.
    """

    def __init__(self, message, best=None, gap=None, replicate=None):
        if replicate is not None:
            message = f"replicate {replicate}: {message}"
        super().__init__(message)
        self.best = best
        self.gap = gap
        self.replicate = replicate


class InfeasibleTieSplit(NumericalError):
    pass


class DegenerateWeights(NumericalError):
    pass


class StencilOutOfDomain(ValidationError):
    pass


class NotPD(NumericalError):
    pass


class EnumerationBudgetExceeded(ValidationError):
    pass


class SeedSearchFailed(NumericalError):
    pass
