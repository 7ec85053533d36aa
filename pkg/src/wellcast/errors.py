"""Exception taxonomy shared across the package.

Anything raised for bad user input derives from ValidationError so the CLI
can map the whole family to one exit code.
"""


class WellcastError(Exception):
    """Base class for all package errors."""


class ValidationError(WellcastError):
    """Invalid data or configuration supplied by the caller."""


class ParameterError(ValidationError):
    """An argument value is outside its documented domain."""


class DimensionError(ValidationError):
    """Array shapes are incompatible with the requested operation."""


class ContractError(ValidationError):
    """An API precondition was violated (misuse rather than bad data)."""


class FormatError(ValidationError):
    """A file could not be parsed against its documented schema."""


class NoBreakthroughError(ValidationError):
    """A water channel is identically zero, so truncation would be empty."""


class MetricError(ValidationError):
    """A metric is undefined for the given inputs (e.g. zero denominator)."""


class TrainingError(WellcastError):
    """Numeric failure during optimization (NaN/Inf loss or gradient)."""
