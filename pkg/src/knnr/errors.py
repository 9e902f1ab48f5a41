"""Exception hierarchy shared across the package."""


class KnnrError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(KnnrError, ValueError):
    """Malformed data, mismatched dimensions or out-of-range arguments."""


class InvalidConfigError(KnnrError, ValueError):
    """Estimator parameters incompatible with the data (e.g. K too large)."""


class InvalidActionError(KnnrError, ValueError):
    """An action that is infeasible in the current environment state."""


class SupportViolationError(KnnrError):
    """Behavior density is zero (or undefined) at an observed action."""


class DegenerateWeightsError(KnnrError):
    """All importance weights vanished, the self-normalized estimate is undefined."""


class DensityUnavailableError(KnnrError):
    """Importance sampling requested but the behavior policy has no density."""


class NumericError(KnnrError, ArithmeticError):
    """Non-convergence or singular linear systems."""


class ResourceError(KnnrError):
    """A guarded computation would exceed its enumeration budget."""
