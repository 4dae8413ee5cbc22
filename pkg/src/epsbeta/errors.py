"""Exception hierarchy shared by every module.

The CLI maps :class:`PipelineError` subclasses to exit status 4 and reports
the class name, so names here are part of the external interface.
"""

from __future__ import annotations


class EpsBetaError(Exception):
    """Base class for all package errors."""


class InvalidCluster(EpsBetaError, ValueError):
    pass


class InvalidDensity(EpsBetaError, ValueError):
    """A density evaluated to a non-positive or non-finite value."""


class PipelineError(EpsBetaError):
    """Raised when a surgery or infiltration pipeline cannot proceed."""


class CubeOutsideGrid(PipelineError):
    pass


class ProfileMismatch(PipelineError):
    pass


class EmptyInterface(PipelineError):
    pass


class ConditionViolated(PipelineError):
    """Neither ordering of the pair touches the exterior in the admissible way."""


class NoCandidateCube(PipelineError):
    pass


class EpsilonTooLarge(PipelineError):
    pass


class BisectionBracketFailure(PipelineError):
    pass


class DisconnectedChamber(PipelineError):
    pass


class BallPackingFailure(PipelineError):
    pass


class BallNotBiphase(PipelineError):
    pass


class NoValidRadius(PipelineError):
    pass


class CasePartitionFailure(PipelineError):
    pass


class ColumnAxisConflict(PipelineError):
    """Sub-cell column data already exists along a different axis."""


class PerimeterDecreased(PipelineError):
    """Early exit: a local absorption already lowers the perimeter.

    Not a failure of the construction; carries the improved cluster so the
    caller can continue from it.
    """

    def __init__(self, message: str, cluster=None, drop: float = 0.0, move: str = ""):
        super().__init__(message)
        self.cluster = cluster
        self.drop = drop
        self.move = move
