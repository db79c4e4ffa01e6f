"""Exception hierarchy.

Every error carries a ``kind`` string used by the CLI to build its
machine-readable error payload.
"""

from __future__ import annotations


class ToolKPError(Exception):
    kind = "runtime"
    stage = "core"

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "stage": self.stage, "type": type(self).__name__, "message": str(self)}
        for attr in ("frame_index", "tick"):
            val = getattr(self, attr, None)
            if val is not None:
                out[attr] = val
        return out


class SchemaError(ToolKPError, ValueError):
    kind = "schema"
    stage = "io"


# geometry


class GeometryError(ToolKPError, ValueError):
    stage = "geometry"


class DegenerateConfiguration(GeometryError):
    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message)
        self.frame_index = frame_index


class PointBehindCamera(GeometryError):
    pass


class NonPositiveDepth(GeometryError):
    pass


# keypoint model


class DegenerateKeypoints(GeometryError):
    pass


class EmptyCloud(GeometryError):
    pass


class NonPositiveDimension(GeometryError):
    pass


# extraction


class ExtractionError(ToolKPError):
    kind = "extraction"
    stage = "extract"


class MaskTooSmall(ExtractionError):
    pass


class NoChangeDetected(ExtractionError):
    pass


class NoGraspContact(ExtractionError):
    pass


class NoPrefunctionFrame(ExtractionError):
    pass


class BoundaryTooSmall(ExtractionError):
    pass


class SelectorOutOfRange(ExtractionError):
    pass


class MissingDepth(ExtractionError):
    pass


class IndexOutOfRange(ExtractionError, IndexError):
    pass


# correspondence


class CorrespondenceError(ToolKPError):
    kind = "correspondence"
    stage = "correspond"


class RegionOutsideMask(CorrespondenceError):
    pass


class CorrespondenceFailed(CorrespondenceError):
    pass


class AxisOutOfPlane(CorrespondenceError):
    pass


class RefinerOutOfRange(CorrespondenceError):
    pass


class ConstraintViolation(CorrespondenceError):
    pass


# planning


class PlanningError(ToolKPError):
    kind = "planning"
    stage = "plan"


class DegenerateProjection(PlanningError):
    pass


class InfeasibleProblem(PlanningError):
    kind = "infeasible"

    def __init__(self, message: str, constraint: str | None = None):
        super().__init__(message)
        self.constraint = constraint

    def to_dict(self) -> dict:
        out = super().to_dict()
        if self.constraint is not None:
            out["constraint"] = self.constraint
        return out


class MaxIterationsExceeded(PlanningError):
    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


# controller


class ControllerError(ToolKPError):
    kind = "controller"
    stage = "simulate"

    def __init__(self, message: str, tick: int | None = None):
        super().__init__(message)
        self.tick = tick


class JointLimitViolation(ControllerError):
    pass


class PositionErrorExceeded(ControllerError):
    pass


# metrics


class EmptySet(ToolKPError, ValueError):
    kind = "schema"
    stage = "eval"


# perception ports


class PortError(ToolKPError):
    kind = "port"
    stage = "ports"


class UnknownTask(PortError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class TransportError(PortError):
    pass


class MalformedResponse(PortError):
    pass


class OutOfRangeSelection(PortError):
    pass


class FixtureError(ToolKPError):
    stage = "fixture"
