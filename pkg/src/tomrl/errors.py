"""Exception types shared across the package."""


class TomError(Exception):
    """Base class for errors raised by tomrl."""


class DimensionError(TomError, ValueError):
    """An array does not have the shape an operation requires."""


class NumericalFault(TomError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class DegenerateDistribution(TomError, ValueError):
    """Sampling weights carry no mass."""


class EmptySupport(TomError, LookupError):
    """A distribution was requested over an empty set (e.g. no episode starts)."""


class AbsentState(TomError, KeyError):
    """A tabular state was queried that never appears in the data."""


class InfeasibleProblem(TomError, ValueError):
    """A constrained solve could not reach its feasibility tolerance."""


class ConfigError(TomError, ValueError):
    """Malformed or unknown configuration entry."""
