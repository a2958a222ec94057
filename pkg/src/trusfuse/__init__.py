"""
TrusFuse - dual-stream B-mode/SWE video classification with adaptive spatial fusion
"""

__version__ = "0.1.0"
__author__ = "TrusFuse Team"

from .errors import (
    ConfigError,
    ContainerFormatError,
    DataError,
    NonFiniteInputError,
    NumericError,
    SplitError,
    TruncatedPayloadError,
    TrusError,
    exit_code_for,
)

__all__ = [
    "ConfigError",
    "ContainerFormatError",
    "DataError",
    "NonFiniteInputError",
    "NumericError",
    "SplitError",
    "TruncatedPayloadError",
    "TrusError",
    "exit_code_for",
]
