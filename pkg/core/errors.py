"""
Exception hierarchy shared by the library and the CLI.

Every error also derives from the closest builtin so callers can catch
either the specific class or e.g. ValueError.
"""


class JetMoeError(Exception):
    """Base class for all library errors."""


class DimensionError(JetMoeError, ValueError):
    """Shapes, extents or dtypes do not agree."""


class ConfigurationError(JetMoeError, ValueError):
    """Invalid configuration value (k out of range, odd head dim, bad schedule...)."""


class RangeError(JetMoeError, IndexError):
    """Token id or position outside the configured range."""


class StateError(JetMoeError, RuntimeError):
    """Operation called in the wrong state (e.g. backward without a tape)."""


class PrecisionError(JetMoeError, TypeError):
    """Operation requires float64 input."""


class DegenerateBatchError(JetMoeError, ValueError):
    """Batch has nothing to average over (empty mask, no pairs, corpus too short)."""


class NumericError(JetMoeError, ArithmeticError):
    """Non-finite loss or gradient."""


class DataError(JetMoeError, ValueError):
    """Missing or malformed corpus / dataset input."""


class CheckpointError(JetMoeError, IOError):
    """Base class for checkpoint load failures."""


class CorruptManifestError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass
