"""Block-aligned chunk KV sharing for a paged KV cache simulator."""

from chunkkv.block_pool import BlockPool, PoolConfig
from chunkkv.chunk_cache import ChunkCache, ChunkRecord, RemoteStore
from chunkkv.prefix_cache import PrefixCache
from chunkkv.scheduler import Admitted, KvEngine, Policy, PolicyKind, Rejected, Request
from chunkkv.segmentation import PAD, Segment, SegmentKind, canonicalize, chunk_id, segment

__all__ = [
    "PAD",
    "Admitted",
    "BlockPool",
    "ChunkCache",
    "ChunkRecord",
    "KvEngine",
    "Policy",
    "PolicyKind",
    "PoolConfig",
    "PrefixCache",
    "Rejected",
    "RemoteStore",
    "Request",
    "Segment",
    "SegmentKind",
    "canonicalize",
    "chunk_id",
    "segment",
]

__version__ = "0.1.0"
