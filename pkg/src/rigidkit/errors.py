"""Exception types raised across rigidkit."""


class RigidKitError(Exception):
    pass


class GeometryError(RigidKitError, ValueError):
    pass


class BehindCameraError(GeometryError):
    pass


class ZeroParallaxError(GeometryError):
    pass


class DegenerateTranslationError(GeometryError):
    pass


class InsufficientDataError(RigidKitError, ValueError):
    pass


class CheiralityError(RigidKitError):
    pass


class EstimationError(RigidKitError):
    """Robust estimation did not reach the inlier quorum.

    ``best`` carries the best attempt (an ``EgomotionEstimate`` or None).
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
