"""Exception types shared across the package."""


class HetprefError(Exception):
    """Base class for package-specific failures."""


class CatalogKeyError(HetprefError, KeyError):
    """Unknown prompt or response id."""


class InvalidChoiceError(HetprefError, ValueError):
    """A choice-set precondition was violated (duplicate pair, chosen not in set, ...)."""


class DegeneratePopulationError(HetprefError, ValueError):
    """A population construction would produce indistinguishable types."""


class ConfigError(HetprefError, ValueError):
    """Bad configuration value; message names the offending field."""


class HashMismatchError(HetprefError):
    """An input file does not match the hash recorded in a manifest."""


class ConvergenceError(HetprefError):
    """An inner optimizer failed to reach its tolerance within the iteration cap."""

    def __init__(self, message: str, grad_norm: float | None = None):
        super().__init__(message)
        self.grad_norm = grad_norm


class RankError(HetprefError, ValueError):
    """A comparison design matrix is rank deficient."""


class StepSizeError(HetprefError):
    """An optimizer diverged; the step size is too large."""
