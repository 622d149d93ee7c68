"""
Error types raised by the wildflow modules.
"""

from __future__ import annotations

from typing import List, Optional


class WildflowError(RuntimeError):
    """Base class for construction and verification failures."""


class InvalidInput(WildflowError):
    pass


class InvalidDensity(WildflowError):
    pass


class NonConvergence(WildflowError):
    def __init__(self, message: str, best_value: Optional[float] = None) -> None:
        super().__init__(message)
        self.best_value = best_value


class DecompositionFailed(WildflowError):
    pass


class InvalidParams(WildflowError):
    pass


class MissingDerivatives(WildflowError):
    pass


class ResourceLimit(WildflowError):
    pass


class MarginExhausted(WildflowError):
    pass


class NonZeroMean(WildflowError):
    pass


class StrictnessUnachievable(WildflowError):
    pass


class CompatibilityViolated(WildflowError):
    pass


class DomainNotCovered(WildflowError):
    pass


class ChiSearchFailed(WildflowError):
    pass


class ProfileViolatesBounds(WildflowError):
    pass


class MissingInput(WildflowError):
    pass


class FormatError(WildflowError):
    pass


class ParseError(WildflowError):
    def __init__(self, message: str, line: int, column: int) -> None:
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class ValidationError(WildflowError):
    def __init__(self, violations: List[str]) -> None:
        super().__init__("; ".join(violations))
        self.violations = list(violations)
