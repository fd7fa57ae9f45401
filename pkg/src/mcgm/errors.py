"""Exception types shared across the package.

Each maps to one failure class surfaced by the CLI: usage/config problems
exit 1, I/O and parsing problems exit 2, numeric failures exit 3.
"""


class McgmError(Exception):
    """Base class for all package errors."""


class DimensionError(McgmError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ContractError(McgmError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(McgmError, ValueError):
    """A config file or flag set is malformed or inconsistent."""


class ParseError(McgmError, ValueError):
    """A text input (XYZ file, manifest) is malformed.

    Carries the 1-based line number when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(McgmError, ValueError):
    """A dataset is unusable for the requested task (missing targets etc.)."""


class GenerationError(McgmError, RuntimeError):
    """Synthetic structure generation could not satisfy its constraints."""


class NumericError(McgmError, ArithmeticError):
    """A non-finite value appeared where finite arithmetic was required."""
