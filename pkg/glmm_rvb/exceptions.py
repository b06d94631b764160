"""Exceptions raised by glmm_rvb."""

from __future__ import annotations

from collections.abc import Sequence


class RvbError(Exception):
    """Base exception for glmm_rvb."""


class ConfigError(RvbError):
    """Invalid run or fit configuration."""


class InvalidV(ConfigError):
    """Shard count outside 1..n."""


class PriorConfigError(ConfigError):
    """Prior that does not fit the model or the run."""


class DataError(RvbError):
    """Input data that cannot form a valid dataset."""


class ParseError(DataError):
    """Malformed input file."""

    def __init__(self, message: str, line: int | None = None) -> None:
        """Initialize with the 1-based file line, when known."""
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MissingColumn(DataError):
    """Referenced column absent from the input."""

    def __init__(self, column: str) -> None:
        """Initialize with the missing column name."""
        self.column = column
        super().__init__(f"missing column: {column}")


class InvalidResponse(DataError):
    """Response outside the family's support."""

    def __init__(self, family: str, line: int | None = None, detail: str = "") -> None:
        """Initialize with the family name and the offending line."""
        self.family = family
        self.line = line
        where = f" at line {line}" if line is not None else ""
        super().__init__(f"invalid {family} response{where}{': ' + detail if detail else ''}")


class RankDeficient(DataError):
    """Fixed-effect design without full column rank."""


class NumericalError(RvbError):
    """Numerical failure during evaluation or optimization."""


class NotPositiveDefinite(NumericalError):
    """Matrix expected to be positive definite is not."""


class OverflowGuard(NumericalError):
    """Natural parameter beyond the overflow guard."""


class DomainError(NumericalError):
    """Argument outside a function's domain."""


class IrlsDiverged(NumericalError):
    """Pooled GLM fit did not converge."""


class ModeSearchFailed(NumericalError):
    """Conditional mode search did not converge."""

    def __init__(self, subjects: Sequence[int]) -> None:
        """Initialize with the subject indices that failed."""
        self.subjects = tuple(subjects)
        super().__init__(f"mode search failed for subjects {list(self.subjects)}")


class DivergedError(NumericalError):
    """Optimization diverged."""


class ZeroSd(NumericalError):
    """Standard deviation of zero where a ratio needs it."""


def error_text(err: BaseException) -> str:
    """Return a useful error string even when str(exception) is empty."""
    return str(err) or type(err).__name__
