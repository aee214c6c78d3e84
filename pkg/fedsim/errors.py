"""
Exception hierarchy for fedsim.

Validation failures derive from InvalidInputError (CLI exit code 1);
failures that happen while a run is in progress derive from
FedsimRuntimeError (CLI exit code 2).
"""
from typing import Optional


class FedsimError(Exception):
    """Base class for all fedsim errors."""


class InvalidInputError(FedsimError, ValueError):
    """Input data, configuration or files failed validation."""


class DimensionMismatchError(InvalidInputError):
    """Array shapes do not agree with the model or with each other."""


class ManifestMismatchError(InvalidInputError):
    """Two parameter vectors do not share the same tensor manifest."""


class EmptyDatasetError(InvalidInputError):
    """An operation that needs examples received none."""


class UnknownClientError(InvalidInputError):
    """An update refers to a client that the server does not know about."""


class MetadataError(InvalidInputError):
    """A metadata manifest row is malformed."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class BlobFormatError(InvalidInputError):
    """A file is not a valid FSIM1 blob (magic, version or header)."""


class BlobTruncatedError(InvalidInputError):
    """An FSIM1 blob ended before its declared payload."""


class FedsimRuntimeError(FedsimError, RuntimeError):
    """A run failed after it started."""


class NonFiniteError(FedsimRuntimeError):
    """A loss or parameter vector became NaN or infinite."""
