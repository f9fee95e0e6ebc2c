"""Exception hierarchy shared across the package."""


class FuiaError(Exception):
    """Base class for all package errors."""


class ShapeError(FuiaError, ValueError):
    """Incompatible shapes; the message names the offending layer."""


class NonFiniteError(FuiaError, FloatingPointError):
    """A NaN or infinity appeared in an intermediate value."""


class UnsupportedActivationError(FuiaError, ValueError):
    """The activation has no usable second derivative."""


class LayerMapMismatch(FuiaError, ValueError):
    """Two parameter vectors with different layer maps were combined."""


class DataFormatError(FuiaError, ValueError):
    """Malformed image file, header, or label."""


class LogFormatError(FuiaError, ValueError):
    """Update log on disk is inconsistent (version, checksum, length)."""


class NoParticipationError(FuiaError, LookupError):
    """A client never appears in an update log."""


class UndefinedCosineError(FuiaError, ZeroDivisionError):
    """Cosine distance against a zero target gradient."""


class ConfigError(FuiaError, ValueError):
    """Invalid experiment configuration."""


class StageError(FuiaError, RuntimeError):
    """A pipeline stage failed or its inputs are missing."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
