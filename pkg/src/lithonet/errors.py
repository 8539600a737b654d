class LithonetError(Exception):
    """Base class for all errors raised by lithonet."""


class ShapeError(LithonetError, ValueError):
    """Array shapes or sizes are structurally incompatible."""


class UsageError(LithonetError, RuntimeError):
    """An API was called in the wrong state or with unusable inputs."""


class CheckpointError(LithonetError, ValueError):
    """A checkpoint file could not be decoded."""
