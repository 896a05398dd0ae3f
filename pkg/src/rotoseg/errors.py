"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes: data/contract problems exit 2,
numerical failures exit 3.
"""

from __future__ import annotations


class RotosegError(Exception):
    """Base class for all package errors."""


class ShapeError(RotosegError, ValueError):
    """Tensor or volume extents are incompatible."""


class ConfigError(RotosegError, ValueError):
    """A configuration value is invalid or unsupported."""


class ContractError(RotosegError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class DataError(RotosegError, ValueError):
    """Input data is malformed or out of range."""


class FormatError(DataError):
    """An on-disk file could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(RotosegError, ArithmeticError):
    """Non-finite values appeared, or a numerical check failed."""
