"""Exception hierarchy shared by all modules."""


class ShapeOptError(Exception):
    """Base class for every error raised by shapeopt."""


class NonConvexInput(ShapeOptError):
    pass


class DegenerateInput(ShapeOptError):
    pass


class InfeasibleSupport(ShapeOptError):
    pass


class ChartTooLong(ShapeOptError):
    pass


class ChartMismatch(ShapeOptError):
    pass


class ResolutionTooCoarse(ShapeOptError):
    pass


class SolverFailure(ShapeOptError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report or {}


class EmptyLevelSet(ShapeOptError):
    pass


class HessianUnreliable(ShapeOptError):
    pass


class StepTooLarge(ShapeOptError):
    pass


class EmptyMass(ShapeOptError):
    pass


class SingularSystem(ShapeOptError):
    pass


class NoFreeEdges(ShapeOptError):
    pass


class OverlappingSupports(ShapeOptError):
    pass


class PreconditionUnmet(ShapeOptError):
    pass


class InfeasibleInit(ShapeOptError):
    pass


class LineSearchFailure(ShapeOptError):
    pass


class NonSimpleEigenvalue(UserWarning):
    """Spectral gap below threshold; signals a pathological mesh."""
