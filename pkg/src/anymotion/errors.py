"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit 2, I/O problems
exit 3 (plain OSError), numerical failures exit 4.
"""


class ValidationError(ValueError):
    """An argument, config field, or data structure violates its contract."""


class DegenerateRotationError(ValidationError):
    """6D rotation input is too close to zero or to parallel vectors."""


class DatasetError(ValidationError):
    """A dataset file or record is malformed or missing required fields."""


class NumericalError(RuntimeError):
    """A computation produced NaN/Inf or otherwise diverged."""
