"""
Exception hierarchy shared by the library and the CLI.

The CLI maps these onto its exit-code contract:
ConfigError -> 1, DataError -> 2, NumericError -> 3.
"""

from typing import Optional


class TrusError(Exception):
    """Base class for every error raised by trusfuse."""

    exit_code = 1


class ConfigError(TrusError):
    """A configuration value or combination violates a rule."""

    exit_code = 1


class DataError(TrusError):
    """Input data is missing, unreadable or malformed."""

    exit_code = 2


class ContainerFormatError(DataError):
    """A tensor container has a bad header (magic, rank, dims or dtype code)."""


class TruncatedPayloadError(DataError):
    """A tensor container holds fewer payload bytes than its header promises."""

    def __init__(self, path, expected: int, actual: int):
        self.path = path
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"Truncated payload in {path}: expected {expected} bytes, found {actual}"
        )


class NonFiniteInputError(DataError):
    """An array contains NaN or infinite values."""

    def __init__(self, index: tuple):
        self.index = index
        super().__init__(f"Non-finite value at index {index}")


class SplitError(DataError):
    """A manifest cannot be split as requested."""


class NumericError(TrusError):
    """Training produced a non-finite quantity."""

    exit_code = 3

    def __init__(self, message: str, epoch: Optional[int] = None, step: Optional[int] = None):
        self.epoch = epoch
        self.step = step
        super().__init__(message)


def exit_code_for(error: BaseException) -> int:
    """Exit code for any failure: library errors keep theirs, I/O counts as data, the rest as numeric."""
    if isinstance(error, TrusError):
        return error.exit_code
    if isinstance(error, OSError):
        return DataError.exit_code
    return NumericError.exit_code
