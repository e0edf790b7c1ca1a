"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class AesegError(Exception):
    exit_code = 1


class ConfigError(AesegError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class ParameterError(ConfigError, ValueError):
    """An argument outside its allowed domain (even filter size, negative factor, ...)."""


class DimensionError(AesegError, ValueError):
    """Shapes that do not agree."""

    exit_code = 3


class ContractError(AesegError, RuntimeError):
    """A call that violates an operation's precondition."""

    exit_code = 3


class FormatError(AesegError):
    """Malformed volume or checkpoint file."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(AesegError, FloatingPointError):
    """Non-finite loss or value encountered during training."""

    exit_code = 4
