"""Exception types raised across the estimator."""


class DataGapError(RuntimeError):
    """A sensor stream has a hole too large to integrate across."""


class DatasetError(RuntimeError):
    """A dataset file is missing or malformed; message carries file/line."""


class InitializationError(RuntimeError):
    """Stationary initialization failed (e.g. motion during the window)."""


class CheiralityError(ValueError):
    """Point projected from behind the camera."""


class TriangulationError(RuntimeError):
    """Triangulation system is rank deficient or otherwise degenerate."""


class OptimizationFailedError(RuntimeError):
    """Normal equations stayed unusable after damping escalation."""


class EvaluationError(RuntimeError):
    """Trajectory evaluation preconditions not met (overlap, length)."""
