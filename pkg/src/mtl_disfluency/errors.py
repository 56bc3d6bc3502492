"""Exception hierarchy shared by every module in the package."""

from __future__ import annotations


class MtlDisfluencyError(Exception):
    """Base class for all package errors."""


class MalformedAnnotation(MtlDisfluencyError, ValueError):
    """Structured annotation (spans, boundaries) cannot be encoded."""


class MalformedTags(MtlDisfluencyError, ValueError):
    """A tag sequence is not well formed and cannot be decoded."""


class ParseError(MtlDisfluencyError, ValueError):
    """Corpus text could not be parsed; carries the offending location."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


class FormatError(MtlDisfluencyError, ValueError):
    """An auxiliary file (embeddings, config) has the wrong layout."""


class ConfigError(MtlDisfluencyError, ValueError):
    """Invalid configuration values."""


class ShapeError(MtlDisfluencyError, ValueError):
    """Operand shapes are incompatible."""


class NumericalError(MtlDisfluencyError, ArithmeticError):
    """A computation produced NaN or infinity; training fills in where it happened."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        self.epoch = epoch
        self.step = step
        super().__init__(message)


class UsageError(MtlDisfluencyError, RuntimeError):
    """An API was called in a state or way it does not support."""


class CheckpointError(MtlDisfluencyError, ValueError):
    """A model checkpoint is truncated, corrupted or of an unknown version."""


class ClippedReparandumWarning(UserWarning):
    """A repair's reparandum distance exceeded the cap and was clipped."""
