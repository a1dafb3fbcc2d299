"""Exception types raised across the toolkit."""


class CalibError(Exception):
    """Base class for all depthcal errors."""


# -- projection / depth maps --------------------------------------------------

class EmptyProjection(CalibError):
    """No point of the cloud landed inside the image."""


class EmptyInput(CalibError):
    """Operation requires at least one valid sample."""


class ShapeMismatch(CalibError):
    """Array shapes or channel counts are incompatible."""


class EmptyScene(CalibError):
    """No synthetic surface intersects the camera frustum."""


# -- losses -------------------------------------------------------------------

class NonPositiveVariance(CalibError):
    """Laplace variance must be strictly positive."""


class EmptyMask(CalibError):
    """Loss evaluated over a mask with zero valid pixels."""


# -- PnP ----------------------------------------------------------------------

class InsufficientPoints(CalibError):
    """Fewer correspondences than the solver minimum."""


class DegenerateConfiguration(CalibError):
    """Correspondence geometry is rank-deficient (e.g. collinear points)."""


class NoConsensus(CalibError):
    """RANSAC could not find a consensus set of the required size."""


# -- file I/O -----------------------------------------------------------------

class TruncatedFile(CalibError):
    """Binary file length is not a whole number of records."""


class EmptyFile(CalibError):
    """File contains no records."""


class MissingKey(CalibError):
    """Required key absent from a calibration file."""


class MalformedLine(CalibError):
    """Calibration line has the wrong arity or non-numeric fields."""


class UnsupportedBitDepth(CalibError):
    """Depth PNG is not 16-bit single channel."""


class DecodeError(CalibError):
    """File could not be decoded at all."""


# -- pipeline -----------------------------------------------------------------

class PipelineStageError(CalibError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
