"""Exception types shared across the toolkit."""


class StemGanError(Exception):
    """Base class for all toolkit errors."""


class ManifestError(StemGanError):
    """Dataset layout or manifest contents are invalid."""


class LabelError(StemGanError):
    """A label file failed to parse or has the wrong length."""


class VideoDecodeError(StemGanError):
    """A video file could not be opened or decoded."""


class ConfigError(StemGanError):
    """A run configuration is malformed or contains unknown keys."""


class CheckpointError(StemGanError):
    """A checkpoint is missing, corrupt, or architecture-incompatible."""


class TrainingDiverged(StemGanError):
    """Training produced non-finite losses or gradients."""
