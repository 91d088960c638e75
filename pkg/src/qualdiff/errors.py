"""Exception types shared across the package."""

from __future__ import annotations


class InvalidInputError(ValueError):
    """Bad argument shape, range or configuration."""


class FormatError(ValueError):
    """A persisted file could not be decoded.

    ``offset`` is the byte position where decoding failed and ``field`` names
    the record being read, when known.
    """

    def __init__(self, message: str, *, offset: int | None = None, field: str | None = None):
        parts = [message]
        if field is not None:
            parts.append(f"field={field!r}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))
        self.offset = offset
        self.field = field


class TrainingError(RuntimeError):
    """Numerical failure during training or sampling."""
