"""Exception types raised across the package."""


class Watermark3DError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(Watermark3DError, ValueError):
    pass


class UnderResolutionError(Watermark3DError, ValueError):
    pass


class DegenerateWarpError(Watermark3DError, ValueError):
    pass


class ShapeMismatchError(Watermark3DError, ValueError):
    pass


class SingularSystemError(Watermark3DError, ValueError):
    pass


class DegenerateHistogramError(Watermark3DError, ValueError):
    pass


class LandmarkDetectionError(Watermark3DError):
    pass


class OrientationAmbiguityError(LandmarkDetectionError):
    pass


class CheckpointError(Watermark3DError):
    pass


class NetpbmError(Watermark3DError, ValueError):
    pass


class ManifestError(Watermark3DError):
    pass


class PipelineStageError(Watermark3DError):
    """A retrieval stage failed; ``stage`` names which one."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
