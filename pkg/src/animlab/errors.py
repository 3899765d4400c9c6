"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration, missing key, or incompatible component wiring."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint loading failures."""


class CheckpointNotFoundError(CheckpointError, FileNotFoundError):
    pass


class CorruptCheckpointError(CheckpointError):
    """A checkpoint file is truncated, malformed, or fails its checksum."""


class CheckpointMismatchError(CheckpointError):
    """A checkpoint was written for a different model configuration."""
