"""Exception hierarchy for the RemDet toolkit."""


class RemdetError(Exception):
    """Base class for every error raised by the toolkit."""


# Tensor and op preconditions


class ShapeMismatchError(RemdetError, ValueError):
    """Operand shapes, dtypes or stored names do not line up."""


class NonIntegralOutputExtentError(RemdetError, ValueError):
    """Convolution geometry does not tile the input exactly."""


class TapeCorruptError(RemdetError):
    """A tape node is missing, foreign or inconsistent with its gradient."""


class DegenerateBatchError(RemdetError, ValueError):
    """Batch statistics need at least two values per channel."""


class SizeSumMismatchError(RemdetError, ValueError):
    """Split sizes do not add up to the channel extent."""


class OddSpatialExtentError(RemdetError, ValueError):
    """Patch merge needs even spatial extents."""


class ChannelNotDivisibleBy4Error(RemdetError, ValueError):
    """Patch split needs a channel count divisible by four."""


class LabelOutOfRangeError(RemdetError, ValueError):
    """Class label outside [0, K)."""


class UnsupportedDTypeError(RemdetError, ValueError):
    """Storage dtype other than f32 or f64."""


class NonFiniteValueError(RemdetError, ValueError):
    """NaN or infinity in strictly checked external data."""


# Models and fusion


class ModeMismatchError(RemdetError):
    """Parameters do not match the train/deploy mode of the block."""


class InvalidInputExtentError(RemdetError, ValueError):
    """Input spatial extents are incompatible with the model strides."""


class AlreadyFusedError(RemdetError):
    """The model is already in deploy mode."""


# Analysis and training


class InsufficientSamplesError(RemdetError, ValueError):
    """Too few samples for a conclusive rank test."""


class DivergedLossError(RemdetError):
    """Training loss became NaN or infinite."""


# Configuration documents


class InvalidConfigError(RemdetError):
    """Configuration is structurally valid but semantically unusable.

    Attributes:
        path: Dotted document path of the offending entry ("" for the root).

    """

    def __init__(self, message: str, path: str = "") -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ConfigSyntaxError(InvalidConfigError):
    """Document is not well-formed JSON."""


class UnknownBlockKindError(InvalidConfigError):
    """Block kind is not one of the known kinds."""


class WidthMismatchError(InvalidConfigError):
    """Consecutive block or stage widths do not chain."""


# Weights files


class BadMagicError(RemdetError):
    """File does not start with the RMDT magic."""


class VersionUnsupportedError(RemdetError):
    """File format version is not supported."""


class TruncatedFileError(RemdetError):
    """File ended early or carries trailing bytes."""
