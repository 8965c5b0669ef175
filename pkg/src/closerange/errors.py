"""Exception hierarchy shared by every pipeline stage."""


class CloseRangeError(Exception):
    """Base class for all errors raised by this package."""


class UnsupportedFormat(CloseRangeError):
    pass


class CorruptData(CloseRangeError):
    pass


class InvalidScale(CloseRangeError, ValueError):
    pass


class ImageTooSmall(CloseRangeError):
    pass


class OutOfBounds(CloseRangeError):
    pass


class DegeneratePatch(CloseRangeError):
    pass


class IncompatibleFeatures(CloseRangeError):
    """Feature files written with different descriptor parameters."""


class InsufficientMatches(CloseRangeError):
    pass


class DegenerateGeometry(CloseRangeError):
    pass


class DisconnectedGraph(CloseRangeError):
    pass


class CollinearDegenerate(CloseRangeError):
    def __init__(self, message, cameras=()):
        super().__init__(message)
        self.cameras = tuple(cameras)


class DegenerateRays(CloseRangeError):
    pass


class DimensionMismatch(CloseRangeError, ValueError):
    pass


class ConfigError(CloseRangeError):
    pass
