"""Exception hierarchy shared across the package.

Every error a caller can act on derives from :class:`RagatrError`; the CLI
maps these to exit code 1 and the HTTP service to status 400. Anything else
escaping a command is treated as an internal error (exit code 2 / HTTP 500).
"""


class RagatrError(Exception):
    """Base class for all errors raised by this package."""


class InvalidVectorError(RagatrError):
    """Embedding has the wrong shape, non-finite components, or a bad norm."""


class DimensionMismatchError(RagatrError):
    """Two vectors (or a vector and an index) disagree on dimensionality."""


class ZeroVectorError(RagatrError):
    """A zero-norm vector was supplied where a direction is required."""


class DuplicateIdError(RagatrError):
    """A record id collides with one already present."""


class MissingSpecError(RagatrError):
    """A target type has no entry in the vehicle spec table."""


class DataError(RagatrError):
    """User-supplied data failed validation."""


class ManifestError(DataError):
    """A manifest file is malformed; the message carries the line number."""


class ConfigError(RagatrError):
    """Invalid configuration value or flag combination."""


class SnapshotError(RagatrError):
    """An index snapshot file could not be read or written."""


class SnapshotBadMagicError(SnapshotError):
    """Snapshot file does not start with the expected magic bytes."""


class SnapshotTruncatedError(SnapshotError):
    """Snapshot file ended before the declared record payload."""


class SnapshotDimensionError(SnapshotError):
    """Snapshot header declares an unusable embedding dimension."""


class RemoteServiceError(RagatrError):
    """A remote HTTP dependency failed after the configured retries."""


class UnparseableAnswerError(RagatrError):
    """Generator output did not contain the value the task demands."""


class PerplexityError(RagatrError):
    """Perplexity calibration could not converge for some point."""


class PipelineError(RagatrError):
    """A pipeline stage failed; ``stage`` names the failing stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
