class NRSlamError(Exception):
    """Base class for all errors raised by nrslam."""

    default_message = "nrslam error"

    def __init__(self, message=None):
        self.message = message or self.default_message
        super().__init__(self.message)


class BehindCamera(NRSlamError):
    """Raised when a point to be projected lies behind the camera."""

    default_message = "Point lies behind the camera"


class NonPositiveDepth(NRSlamError):
    default_message = "Depth must be positive"


class NonPositiveExtent(NRSlamError):
    default_message = "Temporal extent must be positive"


class OutOfRange(NRSlamError, ValueError):
    default_message = "Value out of range"


class Culled(NRSlamError):
    """Raised when a primitive is outside the view frustum."""

    default_message = "Primitive culled"


class StaleForward(NRSlamError):
    """Raised when backward is requested for a render whose graph is gone."""

    default_message = "Render output has no retained graph or contributor lists"


class MissingPriorFile(NRSlamError):
    default_message = "Prior file missing"


PriorMissing = MissingPriorFile


class ShapeMismatch(NRSlamError, ValueError):
    default_message = "Shapes do not match"


class TooFewPoints(NRSlamError):
    default_message = "Too few points"


class NoDepthPrior(NRSlamError):
    default_message = "No depth prior at pixel"


class DegenerateGeometry(NRSlamError):
    default_message = "Too few correspondences for a pose estimate"


class InsufficientFrames(NRSlamError):
    default_message = "Not enough frames"


class InvalidSpec(NRSlamError, ValueError):
    default_message = "Invalid scene spec"


class LengthMismatch(NRSlamError):
    default_message = "Trajectories have different lengths"


class DatasetNotFound(NRSlamError):
    default_message = "Dataset directory not found"


class ConfigError(NRSlamError, ValueError):
    default_message = "Invalid configuration"


class FrameError(NRSlamError):
    """Wraps an error raised while processing a frame."""

    def __init__(self, frame_index: int, cause: Exception):
        self.frame_index = frame_index
        self.cause = cause
        super().__init__(f"Frame {frame_index}: {type(cause).__name__}: {cause}")
