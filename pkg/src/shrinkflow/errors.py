"""Exception hierarchy shared by all shrinkflow modules."""


class ShrinkflowError(Exception):
    """Base class for every error raised by the package."""


class NonManifold(ShrinkflowError):
    pass


class Degenerate(ShrinkflowError):
    pass


class NotConvex(ShrinkflowError):
    pass


class AmbiguousGeodesic(ShrinkflowError):
    """Two distinct geodesic candidates have (nearly) equal length."""


class BaseMismatch(ShrinkflowError):
    pass


class StepTooLong(ShrinkflowError):
    pass


class TooFar(ShrinkflowError):
    pass


class StepRejected(ShrinkflowError):
    pass


class ConvexityLost(ShrinkflowError):
    pass


class NotEnoughSnapshots(ShrinkflowError):
    pass


class OutOfRange(ShrinkflowError):
    pass


class SliceOutOfRange(OutOfRange):
    pass


class InsufficientPaths(ShrinkflowError):
    pass


class InsufficientRuns(ShrinkflowError):
    pass


class DomainError(ShrinkflowError):
    pass


class SolverFailure(ShrinkflowError):
    pass


class ConfigError(ShrinkflowError):
    pass


class BadParams(ConfigError):
    pass


class InvariantFailure(ShrinkflowError):
    pass


class GeodesicFailure(ShrinkflowError, RuntimeError):
    """The shortest-path search did not settle on a straight geodesic."""
