"""Exception hierarchy shared by all pipeline stages.

Every error carries a short ``category`` string that the command-line entry
point prints verbatim, so scripts can branch on it.
"""

from __future__ import annotations


class PathforgeError(Exception):
    category = "error"


class InvalidInputError(PathforgeError, ValueError):
    category = "invalid-input"


class MissingInputError(InvalidInputError):
    category = "missing-input"


class InvalidConfigError(PathforgeError, ValueError):
    category = "invalid-config"


class ShapeError(PathforgeError, ValueError):
    category = "shape"


class UndefinedAUCError(PathforgeError, ValueError):
    """Raised when a validation set contains only one class."""

    category = "undefined-auc"


class ProtocolError(PathforgeError):
    """A benchmark run failed; ``split`` and ``replica`` identify which one."""

    category = "protocol"

    def __init__(self, message: str, split: int | None = None, replica: int | None = None):
        super().__init__(message)
        self.split = split
        self.replica = replica


class FormatError(PathforgeError):
    """Base class for binary container integrity failures."""

    category = "format"


class BadMagicError(FormatError):
    category = "format-magic"


class BadVersionError(FormatError):
    category = "format-version"


class LengthMismatchError(FormatError):
    category = "format-length"


class NonFiniteError(FormatError):
    category = "format-nonfinite"


class DimensionMismatchError(FormatError):
    category = "format-dim"


class ChecksumError(FormatError):
    category = "format-checksum"
