from __future__ import annotations

from typing import Any


class ShapeRegError(Exception):
    """Base class for every error raised by the package."""


class DataError(ShapeRegError, ValueError):
    """Malformed or degenerate data (CSV diagnostics, zero-variance rows, kNN preconditions)."""

    def __init__(self, message: str, *, line: int | None = None, column: int | None = None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)
        self.line = line
        self.column = column


class IndexRangeError(ShapeRegError, IndexError):
    pass


class ShapeError(ShapeRegError, ValueError):
    pass


class SchemaError(ShapeRegError, ValueError):
    def __init__(self, message: str, *, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class UnsupportedVersionError(SchemaError):
    pass


class ParameterError(ShapeRegError, ValueError):
    pass


class SolverError(ShapeRegError, RuntimeError):
    """Solver failure; carries the best state and report known when it stopped."""

    def __init__(self, message: str, *, state: Any = None, report: Any = None):
        super().__init__(message)
        self.state = state
        self.report = report


class IterationLimitError(SolverError):
    pass


class LineSearchError(SolverError):
    pass
