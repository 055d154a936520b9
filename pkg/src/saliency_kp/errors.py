"""Exception types raised across the package."""


class KeypointError(Exception):
    """Base class for all package errors."""


class DegenerateConfiguration(KeypointError):
    pass


class DegenerateCovariance(KeypointError):
    pass


class CloudTooSmall(KeypointError):
    pass


class BadLayerIndex(KeypointError):
    pass


class DimensionMismatch(KeypointError):
    pass


class ShapeMismatch(KeypointError):
    pass


class UnnormalizedSaliency(KeypointError):
    pass


class EmptyCloud(KeypointError):
    pass


class KTooLarge(KeypointError):
    pass


class EmptyHistogram(KeypointError):
    pass


class EmptyKeypointSet(KeypointError):
    pass


class TooFewMatches(KeypointError):
    pass


class EmptyInput(KeypointError):
    pass


class MalformedFile(KeypointError):
    pass


class MalformedHeader(MalformedFile):
    pass


class MalformedRecord(MalformedFile):
    pass


class IOFailure(KeypointError):
    pass


class ConfigError(KeypointError):
    pass
