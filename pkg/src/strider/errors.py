"""Exception types shared across the pipeline."""


class StriderError(Exception):
    """Base class for all package errors."""


class InvalidPose(StriderError):
    """A rigid transform contains non-finite or malformed entries."""


class EmptyCloud(StriderError):
    """An operation that needs points received an empty cloud."""


class EmptyScene(StriderError):
    """Synthetic cloud generation was given no terrain."""


class NoFeasiblePath(StriderError):
    """The planner produced no valid footstep candidate."""


class InsufficientSteps(StriderError):
    """Fewer future footsteps than the walking controller requires."""


class ReplanOutOfRange(StriderError):
    """A mid-swing retarget moved the landing target beyond the safe bound."""


class RevisionConflict(StriderError):
    """A step-buffer update was based on a stale revision."""


class RetargetTooLate(StriderError):
    """Too little swing time remains to rebuild the foot trajectory."""


class NumericalFailure(StriderError):
    """An iterative numerical routine failed to converge."""


class InvalidEvent(StriderError):
    """A scenario event references a non-existent entity."""


class ConfigError(StriderError):
    """Scenario or override parsing failed; message names the offending key."""
