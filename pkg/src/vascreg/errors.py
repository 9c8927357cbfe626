"""Exception hierarchy shared across the package."""


class VascRegError(Exception):
    """Base class for every error raised by vascreg."""


class GeometryError(VascRegError, ValueError):
    pass


class NonPositiveDepth(GeometryError):
    """A point projects from behind (or onto) the camera centre plane."""


class DegenerateCurve(GeometryError):
    pass


class DegenerateTriple(GeometryError):
    """Two of the three points handed to the curvature formula coincide."""


class PoseError(VascRegError):
    pass


class NoFeasibleMatch(PoseError):
    pass


class InsufficientPoints(PoseError, ValueError):
    pass


class DegenerateConfiguration(PoseError, ValueError):
    pass


class ShapeMismatch(VascRegError, ValueError):
    pass


class NoRecordedGraph(VascRegError, RuntimeError):
    """backward() was called on a tensor with no live computation graph."""


class StepOutOfRange(VascRegError, ValueError):
    pass


class InvalidRange(VascRegError, ValueError):
    pass


class TooFewPoints(VascRegError, ValueError):
    pass


class PointCountMismatch(VascRegError, ValueError):
    pass


class EmptyInput(VascRegError, ValueError):
    pass


class ConfigError(VascRegError, ValueError):
    """Invalid run configuration (CLI exit code 2)."""


class NonFiniteLoss(VascRegError, FloatingPointError):
    """Training produced NaN/Inf (CLI exit code 3)."""
