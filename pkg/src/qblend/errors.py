"""Exception classes shared across the package.

Each class maps to one CLI failure category (and exit code), so commands can
report a single-line diagnostic without inspecting tracebacks.
"""


class ConfigError(ValueError):
    """Bad configuration: unknown option values, missing paths, bad ranges."""


class DataFormatError(ValueError):
    """Malformed persisted data (trajectory files, checkpoints).

    ``line`` is the 1-based line number of the offending record when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TransportError(RuntimeError):
    """Remote backend failure, carrying retry metadata."""

    def __init__(self, message: str, url: str = "", attempts: int = 0):
        super().__init__(message)
        self.url = url
        self.attempts = attempts


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""
