"""Exception hierarchy shared by every chunkkv module."""

from __future__ import annotations


class KvCacheError(Exception):
    """Base class for all chunkkv errors."""


# Block pool


class InsufficientBlocks(KvCacheError):
    """Fewer free blocks exist than were requested."""


class BlockIsFree(KvCacheError):
    """Operation requires an owned block but the block is free."""


class RefcountUnderflow(KvCacheError):
    """A reference count would go below zero."""


class BlockBusy(KvCacheError):
    """Block still has live references and cannot be reclaimed."""


class OwnershipConflict(KvCacheError):
    """Block is already owned by a different cache."""


# Segmentation


class MalformedMarkers(KvCacheError, ValueError):
    """Segment markers are unbalanced, nested, or delimit an empty segment."""


class AmbiguousPadding(KvCacheError, ValueError):
    """A padded token sequence could not have come from canonicalization."""


# Chunk cache


class AlreadyResident(KvCacheError):
    """Chunk is already registered in HBM."""


class NotResident(KvCacheError):
    """Chunk is not HBM-resident."""


class NotInRemote(KvCacheError):
    """Remote tier holds no record for the chunk."""


class RecordFormatError(KvCacheError, ValueError):
    """A persisted chunk record is truncated or has an unknown version."""


# Scheduler


class DoubleRelease(KvCacheError):
    """A placement plan was released more than once."""


# Numeric


class DimensionMismatch(KvCacheError, ValueError):
    """Vector dimension does not match the attention config."""


class EmptyValidSet(KvCacheError, ValueError):
    """Every key slot is masked out."""


class SpanOutOfRange(KvCacheError, IndexError):
    """A recompute span falls outside the layout or its assigned pages."""


class ShapeMismatch(KvCacheError, ValueError):
    """Two page sets have different shapes."""


# Workload / CLI


class TraceFormatError(KvCacheError, ValueError):
    """Trace file is malformed."""


class ConfigError(KvCacheError, ValueError):
    """Run configuration is invalid."""
