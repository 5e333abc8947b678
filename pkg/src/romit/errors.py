"""Exception hierarchy shared by all romit modules."""


class RomitError(Exception):
    """Base class for every error raised by romit."""


class ValidationError(RomitError, ValueError):
    """Rejected input: wrong widths, out-of-range parameters, malformed configs."""


class NumericalError(RomitError, ArithmeticError):
    """A computation cannot proceed (singular matrix, vanishing coefficient...)."""


class SupportExplosionError(NumericalError):
    """Sparse support grew beyond the configured cap."""


class DegenerateDistributionError(NumericalError):
    """A distribution has no usable weight left (e.g. nonpositive total)."""
