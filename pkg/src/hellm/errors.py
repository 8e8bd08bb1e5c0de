"""Shared exception types.

The command line maps these onto process exit codes: data problems exit 1,
configuration and usage problems exit 2.
"""


class HellmError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class DataError(HellmError):
    """Malformed or unusable input data."""

    exit_code = 1


class EmptyCorpusError(DataError):
    """A corpus contained no usable documents or words."""


class ParseError(DataError):
    """A file failed to parse. ``line`` is the 1-based offending line."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class ConfigError(HellmError):
    """Invalid configuration or flag values."""

    exit_code = 2


class ContractError(HellmError):
    """A caller violated an API precondition."""

    exit_code = 1


class TrainingError(HellmError):
    """Training aborted (non-finite gradients, failed grid, bad checkpoint)."""

    exit_code = 1
