"""Exception types shared across the package."""


class LastLayerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LastLayerError, ValueError):
    """Operand shapes do not conform."""


class SymmetryError(LastLayerError, ValueError):
    """A matrix required to be symmetric is not."""


class DefinitenessError(LastLayerError, ValueError):
    """A factorization hit a non-positive pivot: the matrix is not SPD."""


class ConfigurationError(LastLayerError, ValueError):
    """Invalid hyperparameter, policy name, or config combination."""


class StateError(LastLayerError, RuntimeError):
    """Stale or inconsistent mutable state (e.g. a tape from another forward pass)."""


class DivergenceError(LastLayerError, RuntimeError):
    """A training run produced non-finite values. Carries a diagnostic record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = dict(record or {})


class InstabilityError(LastLayerError, RuntimeError):
    """An ODE integration blew up; retry with a smaller step size."""


class SnapshotError(LastLayerError, ValueError):
    """A binary snapshot file is malformed or truncated."""
