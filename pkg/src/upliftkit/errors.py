"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: config problems exit 2, data problems
exit 3, anything else exits 4.
"""


class UpliftError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(UpliftError):
    """Invalid pipeline or search configuration."""


class SchemaError(UpliftError):
    """CSV schema is missing required columns or roles."""


class DataError(UpliftError):
    """Input data violates a dataset invariant (bad arm label, etc.)."""


class ParseError(DataError):
    """A cell could not be parsed; carries the offending row number."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)


class PositivityError(DataError):
    """An arm has zero assignment probability or zero observations."""


class NotFittedError(UpliftError):
    """Model used before fit or after failed fit."""
