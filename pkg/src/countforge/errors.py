"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes so pipelines can tell input
problems from numerical ones.
"""


class ValidationError(ValueError):
    """Input rejected: bad geometry, malformed file, inconsistent dims."""


class ZeroCountError(ValidationError):
    """A record with ground-truth count 0 where relative metrics are needed."""


class NumericalError(RuntimeError):
    """Numerical failure: divergence or a non-finite intermediate."""
