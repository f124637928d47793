"""Exception hierarchy shared by every poseopt module."""


class PoseOptError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 2

    def to_json(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class GraphError(PoseOptError):
    def __init__(self, message: str, node_id: str | None = None):
        super().__init__(message)
        self.node_id = node_id

    def to_json(self) -> dict:
        out = super().to_json()
        if self.node_id is not None:
            out["node"] = self.node_id
        return out


class SchemaError(GraphError):
    pass


class DuplicateId(GraphError):
    pass


class DanglingEdge(GraphError):
    pass


class CycleDetected(GraphError):
    pass


class ShapeMismatch(GraphError):
    pass


class UnreachableNode(GraphError):
    pass


class InvalidSpec(PoseOptError):
    pass


class InvalidRatio(PoseOptError):
    pass


class UnknownNodeInPlan(PoseOptError):
    pass


class ToleranceExceeded(PoseOptError):
    def __init__(self, message: str, achieved_ratio: float):
        super().__init__(message)
        self.achieved_ratio = achieved_ratio

    def to_json(self) -> dict:
        return {**super().to_json(), "achieved_ratio": self.achieved_ratio}


class ShapeIncompatibleWithBlock(PoseOptError):
    pass


class TargetUnreachable(PoseOptError):
    exit_code = 3

    def __init__(self, message: str, best_achievable_speedup: float):
        super().__init__(message)
        self.best_achievable_speedup = best_achievable_speedup

    def to_json(self) -> dict:
        return {**super().to_json(), "best_achievable_speedup": self.best_achievable_speedup}


class MissingWeights(PoseOptError):
    pass


class DegenerateSegment(PoseOptError):
    pass


class PlacementFailed(PoseOptError):
    pass
