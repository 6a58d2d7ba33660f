"""Exception types shared across the package.

The CLI maps these onto exit codes: bad usage is 1, DataError-family
problems are 2, numerical failures are 3.
"""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class NumericalError(ArithmeticError):
    """NaN/Inf detected, or a numerical verification failed."""


class DataError(ValueError):
    """Malformed dataset, markup, vocabulary, or token input."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(ValueError):
    """Unreadable checkpoint, or checkpoint incompatible with the run."""
