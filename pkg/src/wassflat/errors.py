"""Exception types shared by all modules."""


class WassflatError(Exception):
    """Base class for library errors."""


class EmptyBall(WassflatError):
    """A ball query has zero mass."""


class ResolutionTooFine(WassflatError):
    """A requested scale lies below the sampling resolution of the measure."""


class MassMismatch(WassflatError):
    """A transport pair does not have unit mass in the open unit ball."""


class TooLarge(WassflatError):
    """A problem exceeds the size cap of the dual LP oracle."""


class PlaneMissesBall(WassflatError):
    """A plane does not meet the ball it is supposed to meet."""


class ScaleConstraintViolated(WassflatError):
    """Two scales do not satisfy the nesting constraint of the comparison."""


class EmptyTree(WassflatError):
    """No cubes are available for the requested ball."""


class DegenerateRegion(WassflatError):
    """A stopping region has no usable graph domain."""


class ConfigInfeasible(WassflatError):
    """Big-piece parameters cannot meet the removed-mass target."""


class ConfigError(WassflatError):
    """A run configuration is malformed or out of range."""


class MeasureFormatError(WassflatError, ValueError):
    """A serialized measure violates the format or its invariants."""
