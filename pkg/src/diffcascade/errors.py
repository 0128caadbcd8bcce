"""Exception types shared across the package.

Plain ``ValueError`` is used for invalid arguments; the classes here cover
failure modes that callers may want to catch separately.
"""


class NumericError(RuntimeError):
    """A computation produced non-finite or otherwise unusable values."""


class CorruptionError(RuntimeError):
    """A persisted artifact (cache entry, checkpoint) failed validation."""


class CheckpointVersionError(CorruptionError):
    """Checkpoint format_version does not match this code."""


class EncoderUnavailableError(RuntimeError):
    """The requested text-encoder backend could not be used."""


class ConfigError(ValueError):
    """A run configuration is inconsistent or contains unknown keys."""
