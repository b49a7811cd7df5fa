"""Exception hierarchy shared across the estimator."""


class RadarSlamError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateGeometryError(RadarSlamError):
    """Geometric operation has no well-defined answer (antipodal bearings,
    collinear point sets, feature collapsing onto a sensor origin)."""


class PropagationError(RadarSlamError):
    """Non-finite or out-of-contract input to a propagation step."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class FilterHealthError(RadarSlamError):
    """Covariance lost symmetry/positive-definiteness beyond repair."""


class CapacityError(RadarSlamError):
    """Feature map is full or a feature id is unknown."""


class DatasetError(RadarSlamError):
    """Malformed input file; carries the offending line when known."""

    def __init__(self, message, path=None, line=None):
        super().__init__(message)
        self.path = path
        self.line = line
