"""Exception types shared across the toolkit.

Each class carries a stable ``code`` string so callers (and the CLI) can
report failures uniformly without matching on message text.
"""

from __future__ import annotations


class VibefmError(Exception):
    """Base class for all toolkit errors."""

    code = "ERROR"


class ShapeMismatch(VibefmError):
    code = "SHAPE_MISMATCH"


class NonFinite(VibefmError):
    code = "NON_FINITE"


class UnknownModality(VibefmError):
    code = "UNKNOWN_MODALITY"


class StreamTooShort(VibefmError):
    code = "STREAM_TOO_SHORT"


class MisalignedStreams(VibefmError):
    code = "MISALIGNED_STREAMS"


class Indivisible(VibefmError):
    code = "INDIVISIBLE"


class EmptyCollection(VibefmError):
    code = "EMPTY_COLLECTION"


class AlreadyNormalized(VibefmError):
    code = "ALREADY_NORMALIZED"


class NonPositiveFactor(VibefmError):
    code = "NON_POSITIVE_FACTOR"


class IndivisibleLength(VibefmError):
    code = "INDIVISIBLE_LENGTH"


class ZeroVector(VibefmError):
    code = "ZERO_VECTOR"


class DimMismatch(VibefmError):
    code = "DIM_MISMATCH"


class EpochOutOfRange(VibefmError):
    code = "EPOCH_OUT_OF_RANGE"


class EmptyDataset(VibefmError):
    code = "EMPTY_DATASET"


class SingleClassDataset(VibefmError):
    code = "SINGLE_CLASS_DATASET"


class StageMismatch(VibefmError):
    code = "STAGE_MISMATCH"


class EmptySubset(VibefmError):
    code = "EMPTY_SUBSET"


class TooSmall(VibefmError):
    code = "TOO_SMALL"


class ClassUnsplittable(VibefmError):
    code = "CLASS_UNSPLITTABLE"


class RatioOutOfRange(VibefmError):
    code = "RATIO_OUT_OF_RANGE"


class LengthMismatch(VibefmError):
    code = "LENGTH_MISMATCH"


class MissingDomain(VibefmError):
    code = "MISSING_DOMAIN"


class NyquistViolation(VibefmError):
    code = "NYQUIST_VIOLATION"


class CheckpointError(VibefmError):
    code = "CHECKPOINT"


class ConfigError(VibefmError):
    """Invalid or unknown experiment configuration keys/values."""

    code = "CONFIG"


class DatasetError(VibefmError):
    """Corrupt or inconsistent on-disk dataset layout."""

    code = "DATASET"
