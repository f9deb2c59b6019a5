"""Exception types raised across the package."""


class SoilMapError(Exception):
    """Base class for all package errors."""


class DegenerateGeometry(SoilMapError, ValueError):
    """A sine in an FEE denominator vanished; the cut configuration is invalid."""


class NoStationaryPoint(SoilMapError):
    """The failure-angle bracket holds no interior minimum of N_gamma."""


class SingularCovariance(SoilMapError, ValueError):
    """A force covariance block is not invertible."""


class InvalidDimensions(SoilMapError, ValueError):
    pass


class OutOfBounds(SoilMapError, IndexError):
    pass


class DegenerateSweep(SoilMapError, ValueError):
    """Start and end blade quads coincide, so nothing was swept."""


class RankDeficientFit(SoilMapError):
    pass


class NoValidSlices(SoilMapError):
    """Every slice line fit failed during FEE parameter extraction."""


class DegenerateDirection(SoilMapError, ValueError):
    pass


class DegenerateWedge(SoilMapError, ValueError):
    pass


class NoContact(SoilMapError):
    """The measurement window carries no cutting (all depths and surcharges ~0).

    ``estimate`` holds the fallback: the prior means with ambiguity variances.
    """

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class NonFinite(SoilMapError, FloatingPointError):
    pass


class ScenarioError(SoilMapError):
    pass
