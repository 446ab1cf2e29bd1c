"""
Error Types

Every failure raised by merge_lab derives from MergeLabError. The concrete classes
also subclass the matching builtin (ValueError, RuntimeError, IOError) so callers
that only know the builtin still catch them.
"""

from typing import Optional


class MergeLabError(Exception):
    """Base class for all merge_lab errors."""


class DimensionError(MergeLabError, ValueError):
    """Tensor shapes do not agree."""


class DomainError(MergeLabError, ValueError):
    """An argument lies outside the domain of the operation."""


class IncompatiblePoolError(DomainError):
    """Models in a pool do not share one architecture."""


class UnsupportedArchitectureError(DomainError):
    """The operation is not defined for this model's architecture."""


class TrainingDivergedError(MergeLabError, RuntimeError):
    """Loss became NaN or infinite during training."""


class CheckpointError(MergeLabError, IOError):
    """A checkpoint file cannot be read or written."""


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint magic bytes."""


class UnsupportedVersionError(CheckpointError):
    """The checkpoint version is not understood by this reader."""


class ChecksumMismatchError(CheckpointError):
    """The CRC64 footer does not match the file contents."""


class TruncatedCheckpointError(CheckpointError):
    """The file ends before the declared contents."""


class CheckpointFormatError(CheckpointError):
    """The file is structurally invalid (bad dtype, duplicate names, missing entries)."""


class ConfigError(MergeLabError, ValueError):
    """An experiment config file is malformed or holds invalid values."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
