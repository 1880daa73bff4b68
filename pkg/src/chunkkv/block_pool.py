"""Fixed-capacity pool of fixed-size KV pages shared by the prefix and chunk caches.

Every block carries exactly one owner tag (free, prefix, or chunk) and a
reference count. Dropping a reference to zero never frees a block on its own:
the owning cache decides whether the block stays resident (chunk KV kept warm
for later requests) or goes back to the free list (request-scoped prefix KV).
"""

from __future__ import annotations

import enum
import heapq
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

from chunkkv.errors import (
    BlockBusy,
    BlockIsFree,
    InsufficientBlocks,
    OwnershipConflict,
    RefcountUnderflow,
)

BlockId = int

DEFAULT_BLOCK_SIZE = 16


class OwnerKind(enum.Enum):
    FREE = "free"
    PREFIX = "prefix"
    CHUNK = "chunk"


@dataclass(frozen=True)
class Owner:
    """Owner tag of a block.

    A ``PREFIX`` owner with ``key=None`` is a request-private block that has
    not (yet) been indexed in the prefix cache, e.g. a partially filled final
    prompt block or a baseline policy's private copy of chunk KV.
    """

    kind: OwnerKind
    key: bytes | None = None
    ordinal: int | None = None

    @property
    def is_free(self) -> bool:
        return self.kind is OwnerKind.FREE


FREE = Owner(OwnerKind.FREE)
PRIVATE = Owner(OwnerKind.PREFIX)


def prefix_owner(key: bytes | None = None) -> Owner:
    return Owner(OwnerKind.PREFIX, key)


def chunk_owner(chunk_id: bytes, ordinal: int) -> Owner:
    return Owner(OwnerKind.CHUNK, chunk_id, ordinal)


@dataclass(frozen=True)
class PoolConfig:
    capacity_blocks: int
    block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self) -> None:
        if self.capacity_blocks <= 0:
            raise ValueError(f"capacity_blocks must be positive, got {self.capacity_blocks}")
        if self.block_size <= 0:
            raise ValueError(f"block_size must be positive, got {self.block_size}")


@dataclass
class KvBlock:
    id: BlockId
    owner: Owner = FREE
    refcount: int = 0
    last_touch: int = 0
    # Padded token ids held by the block; metadata used for chain soundness
    # checks and remote persistence.
    tokens: tuple[int, ...] | None = None
    payload: Any = None


@dataclass(frozen=True)
class PoolStats:
    free: int
    prefix_owned: int
    chunk_owned: int
    evictable: int

    @property
    def capacity(self) -> int:
        return self.free + self.prefix_owned + self.chunk_owned

    @property
    def used(self) -> int:
        return self.prefix_owned + self.chunk_owned


class BlockPool:
    """Passive state machine over ``capacity_blocks`` KV pages.

    Free blocks are handed out lowest index first so identical operation
    sequences always produce identical block ids.

    Args:
        config: Pool capacity and tokens per block.
        payload_factory: When given, called on every allocation to attach a
            fresh zeroed KV page to the block. Metadata-only pools leave it
            ``None``.
    """

    def __init__(
        self,
        config: PoolConfig,
        payload_factory: Callable[[], Any] | None = None,
    ) -> None:
        self.config = config
        self.payload_factory = payload_factory
        self.blocks = [KvBlock(i) for i in range(config.capacity_blocks)]
        self._free_heap = list(range(config.capacity_blocks))
        self.now = 0
        self._n_prefix = 0
        self._n_chunk = 0
        self._n_evictable = 0

    @property
    def capacity(self) -> int:
        return self.config.capacity_blocks

    @property
    def block_size(self) -> int:
        return self.config.block_size

    @property
    def num_free(self) -> int:
        return len(self._free_heap)

    def advance(self, now: int) -> None:
        """Move the logical clock forward; it never runs backwards."""
        if now < self.now:
            raise ValueError(f"clock went backwards: {now} < {self.now}")
        self.now = now

    def _get(self, b: BlockId) -> KvBlock:
        if not 0 <= b < len(self.blocks):
            raise IndexError(f"block {b} outside pool of {len(self.blocks)}")
        return self.blocks[b]

    def _count(self, owner: Owner, delta: int) -> None:
        if owner.kind is OwnerKind.PREFIX:
            self._n_prefix += delta
        elif owner.kind is OwnerKind.CHUNK:
            self._n_chunk += delta

    def allocate(self, n: int, owner: Owner = PRIVATE) -> list[BlockId]:
        """Take ``n`` free blocks, each with refcount 1 and the given owner.

        Raises:
            InsufficientBlocks: If fewer than ``n`` blocks are free. Nothing
                is allocated in that case.
        """
        if n < 0:
            raise ValueError(f"cannot allocate a negative number of blocks ({n})")
        if owner.is_free:
            raise ValueError("allocated blocks need a non-free owner")
        if n > len(self._free_heap):
            raise InsufficientBlocks(f"requested {n} blocks, only {len(self._free_heap)} free")
        out = [heapq.heappop(self._free_heap) for _ in range(n)]
        for b in out:
            blk = self.blocks[b]
            blk.owner = owner
            blk.refcount = 1
            blk.last_touch = self.now
            blk.tokens = None
            blk.payload = self.payload_factory() if self.payload_factory else None
        self._count(owner, n)
        return out

    def incref(self, b: BlockId) -> int:
        blk = self._get(b)
        if blk.owner.is_free:
            raise BlockIsFree(f"block {b} is free")
        if blk.refcount == 0 and blk.owner.kind is OwnerKind.CHUNK:
            self._n_evictable -= 1
        blk.refcount += 1
        blk.last_touch = self.now
        return blk.refcount

    def decref(self, b: BlockId) -> int:
        blk = self._get(b)
        if blk.refcount == 0:
            raise RefcountUnderflow(f"block {b} already has refcount 0")
        blk.refcount -= 1
        blk.last_touch = self.now
        if blk.refcount == 0 and blk.owner.kind is OwnerKind.CHUNK:
            self._n_evictable += 1
        return blk.refcount

    def reclaim(self, b: BlockId) -> None:
        """Return a zero-reference block to the free list."""
        blk = self._get(b)
        if blk.refcount > 0:
            raise BlockBusy(f"block {b} has refcount {blk.refcount}")
        if blk.owner.is_free:
            raise BlockIsFree(f"block {b} is already free")
        if blk.owner.kind is OwnerKind.CHUNK:
            self._n_evictable -= 1
        self._count(blk.owner, -1)
        blk.owner = FREE
        blk.tokens = None
        blk.payload = None
        heapq.heappush(self._free_heap, b)

    def claim(self, b: BlockId, owner: Owner) -> None:
        """Hand a caller-held private block to a cache under ``owner``.

        Only unindexed prefix blocks (fresh allocations) can be claimed; this
        is the one path by which a live block gains a keyed owner.

        Raises:
            OwnershipConflict: If the block already belongs to a cache.
        """
        blk = self._get(b)
        if blk.owner != PRIVATE:
            raise OwnershipConflict(f"block {b} is owned by {blk.owner.kind.value}")
        if owner.is_free:
            raise ValueError("use reclaim() to free a block")
        self._count(blk.owner, -1)
        self._count(owner, 1)
        blk.owner = owner
        if owner.kind is OwnerKind.CHUNK and blk.refcount == 0:
            self._n_evictable += 1

    def release_to_private(self, b: BlockId) -> None:
        """Drop a keyed prefix owner tag, keeping the block allocated."""
        blk = self._get(b)
        if blk.owner.kind is not OwnerKind.PREFIX:
            raise OwnershipConflict(f"block {b} is not prefix-owned")
        blk.owner = PRIVATE

    def set_tokens(self, b: BlockId, tokens: Sequence[int]) -> None:
        blk = self._get(b)
        if blk.owner.is_free:
            raise BlockIsFree(f"block {b} is free")
        if len(tokens) > self.block_size:
            raise ValueError(f"{len(tokens)} tokens do not fit a block of {self.block_size}")
        blk.tokens = tuple(tokens)

    def owner(self, b: BlockId) -> Owner:
        return self._get(b).owner

    def refcount(self, b: BlockId) -> int:
        return self._get(b).refcount

    def stats(self) -> PoolStats:
        return PoolStats(
            free=len(self._free_heap),
            prefix_owned=self._n_prefix,
            chunk_owned=self._n_chunk,
            evictable=self._n_evictable,
        )

    def audit(self) -> PoolStats:
        """Recompute :meth:`stats` by scanning every block.

        Also checks the per-block invariants and raises ``AssertionError`` if
        the incremental counters or the free list disagree with block state.
        """
        free = prefix = chunk = evictable = 0
        for blk in self.blocks:
            assert blk.refcount >= 0, f"block {blk.id} refcount {blk.refcount}"
            if blk.owner.is_free:
                assert blk.refcount == 0, f"free block {blk.id} has refcount {blk.refcount}"
                free += 1
            elif blk.owner.kind is OwnerKind.PREFIX:
                prefix += 1
            else:
                chunk += 1
                evictable += blk.refcount == 0
        scanned = PoolStats(free, prefix, chunk, evictable)
        assert sorted(self._free_heap) == [b.id for b in self.blocks if b.owner.is_free]
        assert scanned == self.stats(), f"counters {self.stats()} != scan {scanned}"
        return scanned

    def snapshot(self) -> tuple:
        """Hashable image of all pool state, for atomicity checks."""
        return (
            self.now,
            tuple(sorted(self._free_heap)),
            tuple(
                (b.owner, b.refcount, b.last_touch, b.tokens, _payload_digest(b.payload))
                for b in self.blocks
            ),
        )


def _payload_digest(payload: Any) -> Any:
    if payload is None:
        return None
    to_bytes = getattr(payload, "to_bytes", None)
    return to_bytes() if to_bytes else id(payload)
