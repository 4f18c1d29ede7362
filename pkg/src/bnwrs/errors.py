"""Exception types shared across the package.

The CLI maps these onto exit codes: config errors exit 2, data errors
exit 3, numerical aborts exit 4.
"""


class ConfigError(Exception):
    """Invalid experiment configuration or architecture description."""


class DataFormatError(Exception):
    """Malformed dataset file (bad magic, truncation, count mismatch)."""


class NumericalAbortError(Exception):
    """Training produced a non-finite loss; the run was aborted."""

    def __init__(self, message: str, last_good_snapshot: str | None = None):
        super().__init__(message)
        self.last_good_snapshot = last_good_snapshot
