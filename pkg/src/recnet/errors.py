"""Exception types shared across the package."""

from __future__ import annotations


class FormatError(ValueError):
    """A file or byte stream does not follow the expected layout.

    ``offset`` is the byte offset (binary formats) or ``line`` the 1-based line
    number (text formats) where parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        where = []
        if offset is not None:
            where.append(f"offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.line = line


class ShapeError(ValueError):
    """Tensor shapes are incompatible with an operation or a layer."""


class ConfigError(ValueError):
    """A configuration value is invalid or cannot be satisfied."""
