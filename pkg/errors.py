"""
Error hierarchy.

Every error raised by the library derives from TworegError through one of three
category bases. The CLI maps the category to its exit code:

- ValidationError -> 2
- DataError       -> 3
- NumericalError  -> 4
"""

from typing import Optional


class TworegError(Exception):
    exit_code = 1


class ValidationError(TworegError, ValueError):
    exit_code = 2


class DataError(TworegError):
    exit_code = 3


class NumericalError(TworegError, ArithmeticError):
    exit_code = 4


# Validation


class InvalidPenalty(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class InvalidParameter(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class UnsupportedConfig(ValidationError):
    pass


class OutputDirectoryBusy(ValidationError):
    pass


# Data


class TickerNotFound(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ParseError(DataError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class InsufficientData(DataError, ValueError):
    pass


class DataFileNotFound(DataError, FileNotFoundError):
    pass


# Numerical


class RankDeficient(NumericalError):
    def __init__(self, message: str, tolerance: float, fold: Optional[int] = None):
        suffix = f" (relative tolerance {tolerance:g}"
        suffix += f", fold {fold})" if fold is not None else ")"
        super().__init__(message + suffix)
        self.tolerance = tolerance
        self.fold = fold


class NotPositiveSemidefinite(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class SingularPenaltySystem(NumericalError):
    pass


class BootstrapDegenerate(NumericalError):
    pass


class DegeneratePrior(NumericalError):
    pass


class DegenerateNormalization(NumericalError):
    pass


class DegenerateR2(NumericalError):
    pass


class SelectionFoldFailure(NumericalError):
    def __init__(self, message: str, fold: int):
        super().__init__(f"fold {fold}: {message}")
        self.fold = fold
