"""Exception types shared across the package."""


class MMError(Exception):
    """Base class for all package errors."""


class InvalidSequenceError(MMError, ValueError):
    """A sequence violates the model's length limit."""


class InvalidTokenError(MMError, ValueError):
    """A token id is outside its vocabulary (or is the end marker)."""


class EnumerationTooLarge(MMError, RuntimeError):
    """The model support is too large to enumerate under the configured cap."""


class ParseError(MMError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ConfigError(MMError, ValueError):
    """Invalid run or estimator configuration."""
