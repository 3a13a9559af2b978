"""Package exception types."""


class Splat4DError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(Splat4DError):
    """Non-finite or out-of-contract numeric inputs."""


class DegenerateTemporalExtentError(Splat4DError):
    """Temporal variance collapsed below the 1e-12 floor."""


class TrackingDegenerateError(Splat4DError):
    """No usable residual pixels; caller should fall back to motion prediction."""


class ProviderError(Splat4DError):
    """A track provider failed; carries the offending frame index."""

    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class ConfigError(Splat4DError):
    """Malformed or out-of-range run configuration."""


class DataError(Splat4DError):
    """Dataset files missing, malformed, or inconsistent."""


class SceneSpecError(Splat4DError):
    """Invalid synthetic scene specification or generation failure."""


class CheckpointFormatError(Splat4DError):
    """Checkpoint file has the wrong magic/version or is truncated."""
