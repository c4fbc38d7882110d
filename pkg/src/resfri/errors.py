"""Exception hierarchy shared by every module.

The CLI maps each class to a fixed exit code, so raise the most specific one.
"""


class ResFRIError(Exception):
    """Base class for all package errors."""


class ShapeError(ResFRIError, ValueError):
    pass


class ConfigError(ResFRIError, ValueError):
    pass


class DataError(ResFRIError, ValueError):
    pass


class FormatError(DataError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(ResFRIError, RuntimeError):
    pass


class NumericError(ResFRIError, ArithmeticError):
    pass
