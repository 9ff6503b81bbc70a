"""Exception types shared across the package.

The CLI maps each family to a distinct exit code, so library code should
raise the most specific type that applies.
"""


class NpbhteError(Exception):
    """Base class for package-specific errors."""


class ConfigError(NpbhteError):
    """Invalid or inconsistent run configuration."""


class DataError(NpbhteError):
    """Input data failed parsing or validation."""


class RankDeficiencyError(NpbhteError):
    """Design matrix is numerically rank deficient.

    ``column`` is the index of the first column (in the original order)
    that the pivoted factorization flagged as dependent.
    """

    def __init__(self, message: str, column: int | None = None):
        super().__init__(message)
        self.column = column


class ReplicateError(NpbhteError):
    """A bootstrap or forest replicate failed; the index is attached."""

    def __init__(self, replicate: int, message: str = ""):
        self.replicate = replicate
        super().__init__(message or f"replicate {replicate} failed")
