"""Exception types shared across the calibration engine."""


class CalibError(Exception):
    """Base class for all engine errors."""


class MaturityOffGrid(CalibError):
    """An instrument maturity does not sit on the time grid."""


class EmptyBand(CalibError):
    """A transition-kernel row has no destination point inside its window."""


class NonFiniteMessage(CalibError):
    """A log-message contraction produced non-finite values where mass exists."""


class NewtonDiverged(CalibError):
    """An inner Newton solve ran out of iterations with backtracking exhausted."""


class PriceOutOfBounds(CalibError):
    """An option price violates static arbitrage bounds."""


class TooLarge(CalibError):
    """A dense path tensor would exceed the size guard."""


class GridMismatch(CalibError):
    """Coarse and fine discretizations are not nested/compatible."""


class ConfigError(CalibError):
    """A run configuration failed validation."""
