"""
Error hierarchy for the synthesis and simulation engine.

One base class, one subclass per failure the pipeline can name. Every error
carries the context a caller needs to report it (point, label, stage) as
plain attributes, so command handlers can serialize them without parsing
messages.
"""

from typing import Any, Optional, Sequence


class QmtError(Exception):
    """Base class for every engine error."""

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.context = context

    def to_dict(self) -> dict:
        data = {"type": type(self).__name__, "error": str(self)}
        for key, value in self.context.items():
            if hasattr(value, "tolist"):
                value = value.tolist()
            data[key] = value
        return data


# system
class InvalidDimension(QmtError):
    """State or control has the wrong shape for the system."""


class ConstraintViolation(QmtError):
    """Control norm exceeds 1 + tol."""


class NonFiniteField(QmtError):
    """A field or Jacobian evaluator returned NaN or Inf."""


# extremal
class DegenerateCovector(QmtError):
    """H1 is at or below the normal/abnormal floor."""


class IntegrationFailure(QmtError):
    """Solver failure or H1 drift beyond tolerance."""


class OffSlice(QmtError):
    """Initial covector does not satisfy H1(x̄, p0) = 1."""


# synthesis
class InvalidGrid(QmtError):
    """Grid spec is unusable (spacing, dimension, memory budget)."""


class Uncovered(QmtError):
    """Query point falls in a cell no front sample reached."""


class NoOptimalControl(QmtError):
    """Optimal feedback requested inside the singular region or at the target."""


class DegenerateGradient(QmtError):
    """|F(x)^T grad T| fell below the gradient floor."""


class SingularRegion:
    """Marker returned by grad_time inside the singular mask (not raised)."""

    __slots__ = ("point",)

    def __init__(self, point: Optional[Sequence[float]] = None):
        self.point = point

    def __repr__(self) -> str:
        return f"SingularRegion(point={self.point!r})"

    def __bool__(self) -> bool:
        return False


# escape / hysteresis
class EscapeSearchFailure(QmtError):
    """No escape candidate leaves the singular neighbourhood in time."""


class ShellCertificationFailure(QmtError):
    """Optimal-flow invariance of the omega shells could not be certified."""


class JumpTargetUndefined(QmtError):
    """Point lies in the jump set but no k_d clause yields a new label."""


class InvalidShells(QmtError):
    """A shell family has a nonpositive gap between consecutive levels."""


# hybrid execution
class StuckState(QmtError):
    """Neither flow nor jump is possible at the current state."""


class BlowUp(QmtError):
    """State norm exceeded the blow-up bound."""


class InstantZeno(QmtError):
    """Jump chain reached n_max with a label change still enabled."""


# cli
class ArtifactsMissing(QmtError):
    """Simulation requested before synth produced its artifacts."""


class ScenarioError(QmtError):
    """Scenario file has an invalid value."""


class StageError(QmtError):
    """Wraps a module error raised inside a command pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}", stage=stage)
        self.stage = stage
        self.cause = cause
