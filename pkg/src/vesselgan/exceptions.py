"""Exception hierarchy shared by every subsystem.

Each class carries a short ``category`` string used by the command line
front-end to emit machine-parsable error lines.
"""


class VesselGANError(Exception):
    category = "runtime"


class ConfigurationError(VesselGANError, ValueError):
    category = "config"


class ChannelCountError(VesselGANError, ValueError):
    category = "input"


class ShapeError(VesselGANError, ValueError):
    category = "shape"


class SamplerError(VesselGANError, ValueError):
    category = "sampler"


class DatasetIntegrityError(VesselGANError):
    category = "dataset"


class NumericError(VesselGANError, FloatingPointError):
    category = "numeric"


class UndefinedMetricError(VesselGANError, ValueError):
    category = "metric"


class ContainerFormatError(VesselGANError, ValueError):
    category = "format"


class TrainingDivergedError(VesselGANError):
    """Raised when a loss turns non-finite; ``checkpoint`` points at the last good state."""

    category = "diverged"

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint

