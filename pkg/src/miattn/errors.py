"""Exception hierarchy shared across the package."""

from __future__ import annotations


class MiattnError(Exception):
    """Base class for every error raised by miattn."""


class DataError(MiattnError, ValueError):
    """Input data is malformed or inconsistent with what an operation expects."""


class ShapeMismatch(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class IoFailure(MiattnError, OSError):
    """Reading or writing a file failed."""
