"""Exception types shared across the toolkit."""


class ImshieldError(Exception):
    """Base class for all toolkit errors."""


class DecodeError(ImshieldError):
    """Raised when an image file cannot be read or decoded."""


class ShapeError(ImshieldError):
    """Raised when array shapes or dimensions violate a contract."""


class EmptyDatasetError(ImshieldError):
    """Raised when an operation requires a non-empty manifest."""


class VersionError(ImshieldError):
    """Raised when a checkpoint is truncated or has an unknown schema."""


class CapabilityError(ImshieldError):
    """Raised when an editing backend does not support the requested mode."""


class BackendFailure(ImshieldError):
    """Raised when an editing backend fails internally."""


class DuplicateIdError(ImshieldError):
    """Raised when registering a backend or denoiser id twice."""


class UnknownBackendError(ImshieldError):
    """Raised when resolving an id that was never registered."""


class UnknownDenoiserError(ImshieldError):
    """Raised when a counter-attack names an unregistered denoiser."""


class DegenerateMaskError(ImshieldError):
    """Raised when a loss normalization would divide by an empty mask."""


class NonFiniteLossError(ImshieldError):
    """Raised when a training step produces a NaN or infinite loss."""


class FrameMismatchError(ImshieldError):
    """Raised when video frames, masks, or prompts do not align."""


class ScorerUnavailableError(ImshieldError):
    """Raised when the text-image scorer cannot be loaded."""


class ConfigError(ImshieldError):
    """Raised on invalid configuration files or overrides."""
