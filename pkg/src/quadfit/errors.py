"""Exception hierarchy for quadfit.

Two orthogonal bases classify failures for the CLI exit-code mapping:
``UserDataError`` (bad inputs, schema or dimension problems -> exit 1) and
``NumericalError`` (aborts during computation -> exit 2).
"""


class QuadfitError(Exception):
    """Base class for all quadfit errors."""


class UserDataError(QuadfitError):
    """Invalid user-supplied data or parameters (CLI exit code 1)."""


class NumericalError(QuadfitError):
    """Numerical failure during computation (CLI exit code 2)."""


class InvalidParameterError(UserDataError):
    """An argument violates a precondition (non-finite, wrong sign, bad dims)."""


class DimensionMismatchError(InvalidParameterError):
    """Array shapes do not agree."""


class SchemaError(UserDataError):
    """A file violates its documented schema; the message names the field."""


class NonSPDError(SchemaError):
    """A covariance matrix is not symmetric positive-definite."""


class DegenerateAnnotationError(UserDataError):
    """An annotation cannot support the requested computation."""


class BehindCameraError(NumericalError):
    """A point lies at or behind the camera plane; the message names its index."""


class PoisonedValueError(NumericalError):
    """A NaN or Inf appeared during a forward pass; names the primitive."""


class NumericalDegeneracyError(NumericalError):
    """All mixture densities underflowed for a data row; names the row."""
