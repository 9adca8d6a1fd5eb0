"""Exception hierarchy shared by all modules."""


class MvkpError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(MvkpError, ValueError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class DegenerateBaseline(GeometryError):
    pass


class DegenerateEpipolarPoint(GeometryError):
    pass


class ParallelRays(GeometryError):
    pass


class CheiralityViolation(GeometryError):
    pass


class InsufficientViews(GeometryError):
    pass


class EmptyGroup(MvkpError, ValueError):
    pass


class NoCovisibleKeypoints(MvkpError, ValueError):
    pass


class SolverError(MvkpError):
    """Raised by the pose solver; ``stage`` names the failing stage when known."""

    def __init__(self, message="", stage=None):
        super().__init__(message)
        self.stage = stage


class NoValidHypothesis(SolverError):
    pass


class DegenerateConfiguration(SolverError, ValueError):
    pass


class InsufficientPoints(SolverError, ValueError):
    pass


class NoResidualTerms(SolverError):
    pass


class TooFewPoints(MvkpError, ValueError):
    pass


class EmptyNeighborhood(MvkpError, ValueError):
    pass


class ShapeMismatch(MvkpError, ValueError):
    pass


class EmptyModel(MvkpError, ValueError):
    pass


class GridTooLarge(MvkpError, ValueError):
    pass


class ConfigInvalid(MvkpError, ValueError):
    pass


class SceneInvalid(MvkpError, ValueError):
    pass


class SchemaMismatch(MvkpError, ValueError):
    pass
