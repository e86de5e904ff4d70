"""Exception hierarchy shared by all modules."""


class SpsurvError(Exception):
    """Base class for all errors raised by spsurv."""


class ValidationError(SpsurvError, ValueError):
    """Invalid input data, configuration or parameter value."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class SchemaError(ValidationError):
    """A column named in the schema is missing from the input file."""


class SpatialJoinError(ValidationError):
    """An observation references a spatial unit that does not exist."""


class StructureError(ValidationError):
    """The spatial structure violates a model assumption."""


class NumericalError(SpsurvError, ArithmeticError):
    """A factorization, solve or likelihood evaluation failed numerically."""
