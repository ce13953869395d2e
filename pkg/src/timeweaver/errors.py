"""Exception types shared across the package."""


class TimeWeaverError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TimeWeaverError):
    """Malformed, unknown, or out-of-range configuration value."""


class DimensionMismatchError(TimeWeaverError):
    """Array shapes or divisibility constraints violated."""


class NoValidReferenceError(TimeWeaverError):
    """A reference set contains no entries marked valid."""


class UntrainedEncoderError(TimeWeaverError):
    """An operation requires encoder weights that were never trained."""


class UntrainedCheckpointError(TimeWeaverError):
    """Restoration was requested against a never-trained checkpoint."""


class UntrainedWeightsWarning(UserWarning):
    """A forward pass ran on randomly initialized weights."""
