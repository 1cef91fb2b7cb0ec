"""Exception hierarchy shared by the file formats, training loops and CLI.

Each class carries the process exit code the CLI maps it to.
"""
from __future__ import annotations


class PointDistillError(Exception):
    exit_code = 1


class UsageError(PointDistillError, ValueError):
    exit_code = 2


class MissingInputError(PointDistillError, FileNotFoundError):
    exit_code = 3


class IncompatibleError(PointDistillError):
    """Inputs parse fine but do not fit together (config digest, shapes, pairing)."""
    exit_code = 4


class DigestMismatchError(IncompatibleError):
    pass


class MissingTensorError(IncompatibleError):
    pass


class TensorShapeError(IncompatibleError):
    pass


class PairingError(IncompatibleError):
    """A sample has no teacher embedding with the same id."""


class FormatError(PointDistillError, ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""
    exit_code = 5

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    pass


class TrainingAborted(PointDistillError):
    """Non-finite loss or gradient; ``checkpoint`` names the last good state if one was written."""
    exit_code = 6

    def __init__(self, message: str, step: int, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint
