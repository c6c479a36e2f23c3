"""Exception hierarchy and CLI exit codes."""

from typing import Optional

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class TtnfError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = EXIT_NUMERICAL


class ShapeError(TtnfError, ValueError):
    """Extent, rank or index mismatch."""


class MemoryBudgetError(TtnfError):
    """An operation would materialize more elements than the configured budget."""

    def __init__(self, what: str, needed: int, budget: int):
        super().__init__(f"{what} needs {needed} elements, budget is {budget}")
        self.needed = needed
        self.budget = budget


class RankPatternError(TtnfError, ValueError):
    """TT-rank is not a clamped pyramid."""


class NumericalError(TtnfError):
    """SVD non-convergence or non-finite values."""


class ConfigError(TtnfError):
    """Invalid configuration file or flag."""

    exit_code = EXIT_CONFIG

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ArtifactIOError(TtnfError):
    """Missing, unreadable or corrupt artifact (checkpoint, scene, image)."""

    exit_code = EXIT_IO
