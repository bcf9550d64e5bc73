"""Exception hierarchy shared by all pipeline stages."""


class PancalError(Exception):
    """Base class for all library errors."""


class ValidationError(PancalError, ValueError):
    """Invalid input or configuration; the message names the violated invariant."""


class RangeError(ValidationError):
    """Coordinate outside its valid domain (e.g. pixel out of image bounds)."""


class ParseError(PancalError):
    """A file could not be parsed; carries path and location context."""


class CheiralityError(PancalError):
    """Point has non-positive depth in the camera frame."""


class NumericalError(PancalError):
    """An iterative numeric procedure failed; carries the last residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DomainError(PancalError):
    """Input outside the mathematical domain of the operation."""


class DegenerateConfigurationError(PancalError):
    """Point configuration too degenerate for the estimator (collinear, too few)."""


class UsageError(PancalError):
    """Operation invoked on arguments that break its pairing contract."""


class DegeneratePairError(PancalError):
    """Two-view bootstrap found too few consistent correspondences."""


class RotationOnlyError(DegeneratePairError):
    """Two-view pair has no parallax (pure rotation)."""


class LowParallaxError(PancalError):
    """Triangulation rays are too close to parallel."""


class LocalizationImpossibleError(PancalError):
    """No 2D-3D correspondences could be resolved for the query."""


class LocalizationFailedError(PancalError):
    """Pose search finished without a model meeting the inlier minimum."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ReconstructionFailedError(PancalError):
    """Incremental reconstruction could not proceed; carries the failing stage."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class NoIntersectionError(PancalError):
    """Ray is parallel to the plane."""


class BehindCameraError(PancalError):
    """Ray-plane intersection lies at a non-positive ray parameter."""


class TrackUnusableError(PancalError):
    """Too few liftable samples remain in an image track."""


class GenerationError(PancalError):
    """Synthetic scene specification is infeasible."""
