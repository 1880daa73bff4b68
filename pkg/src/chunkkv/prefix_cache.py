"""Hash-chained prefix cache over full KV blocks.

Each full block is keyed by ``H(parent_key, block_tokens)``, so a key
identifies the block's content *and* everything before it. The same index
holds the per-request head block of every cached chunk: the head block is
recomputed in context and only reused by requests whose preceding content
is identical.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from collections.abc import Collection, Sequence

from chunkkv.block_pool import BlockId, BlockPool, OwnerKind, prefix_owner
from chunkkv.errors import OwnershipConflict
from chunkkv.segmentation import tokens_to_bytes

PrefixKey = bytes
ROOT_KEY: PrefixKey = hashlib.blake2b(b"chunkkv-prefix-root", digest_size=16).digest()


def chain_key(parent: PrefixKey, block_tokens: Sequence[int]) -> PrefixKey:
    h = hashlib.blake2b(parent, digest_size=16, person=b"chunkkv-prefix")
    h.update(tokens_to_bytes(block_tokens))
    return h.digest()


def chain_keys(
    padded_tokens: Sequence[int], block_size: int, parent: PrefixKey = ROOT_KEY
) -> list[PrefixKey]:
    """Keys of every *full* block of ``padded_tokens``, in order."""
    keys = []
    for start in range(0, len(padded_tokens) - block_size + 1, block_size):
        parent = chain_key(parent, padded_tokens[start : start + block_size])
        keys.append(parent)
    return keys


class PrefixCache:
    """Index of prefix-owned blocks keyed by their chain hash.

    Lookups never change reference counts; callers acquire what they use.

    Args:
        pool: Shared block pool.
        retain: Keep zero-reference indexed blocks resident (reclaimable
            under pressure, oldest release first) instead of freeing them as
            soon as the last request lets go.
    """

    def __init__(self, pool: BlockPool, retain: bool = False) -> None:
        self.pool = pool
        self.retain = retain
        self.index: dict[PrefixKey, BlockId] = {}
        self._idle: OrderedDict[PrefixKey, None] = OrderedDict()

    @property
    def block_size(self) -> int:
        return self.pool.block_size

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, key: PrefixKey) -> bool:
        return key in self.index

    def lookup(self, key: PrefixKey, tokens: Sequence[int] | None = None) -> BlockId | None:
        b = self.index.get(key)
        if b is None:
            return None
        # Guard against digest collisions: stored content must match.
        if tokens is not None and self.pool.blocks[b].tokens != tuple(tokens):
            return None
        return b

    def match_prefix(
        self, padded_tokens: Sequence[int], block_size: int
    ) -> tuple[int, list[BlockId]]:
        """Longest run of leading full blocks whose whole key chain is indexed."""
        if block_size != self.block_size:
            raise ValueError(f"block_size {block_size} != pool block size {self.block_size}")
        hits: list[BlockId] = []
        parent = ROOT_KEY
        for start in range(0, len(padded_tokens) - block_size + 1, block_size):
            tokens = padded_tokens[start : start + block_size]
            parent = chain_key(parent, tokens)
            b = self.lookup(parent, tokens)
            if b is None:
                break
            hits.append(b)
        return len(hits), hits

    def insert_block(self, key: PrefixKey, tokens: Sequence[int], b: BlockId) -> bool:
        """Index one full block under ``key``.

        Returns ``False`` (block stays request-private) if another block
        already holds the key.
        """
        if len(tokens) != self.block_size:
            raise ValueError("only fully filled blocks can be indexed")
        owner = self.pool.owner(b)
        if owner.kind is OwnerKind.CHUNK:
            raise OwnershipConflict(f"block {b} is chunk-owned")
        if owner.key is not None:
            raise OwnershipConflict(f"block {b} is already indexed")
        self.pool.set_tokens(b, tokens)
        if key in self.index:
            return False
        self.pool.claim(b, prefix_owner(key))
        self.index[key] = b
        return True

    def insert_prefix(
        self, padded_tokens: Sequence[int], block_ids: Sequence[BlockId]
    ) -> list[PrefixKey]:
        keys = chain_keys(padded_tokens, self.block_size)
        if len(block_ids) > len(keys):
            raise ValueError(f"{len(block_ids)} blocks given but only {len(keys)} are full")
        bs = self.block_size
        for i, b in enumerate(block_ids):
            self.insert_block(keys[i], padded_tokens[i * bs : (i + 1) * bs], b)
        return keys[: len(block_ids)]

    def register_chunk_head(
        self, preceding_chain: PrefixKey, chunk_block_tokens: Sequence[int], b: BlockId
    ) -> PrefixKey:
        """Index a chunk's in-context head block under the request's chain."""
        key = chain_key(preceding_chain, chunk_block_tokens)
        self.insert_block(key, chunk_block_tokens, b)
        return key

    def acquire(self, b: BlockId) -> int:
        key = self.pool.owner(b).key
        if key is not None:
            self._idle.pop(key, None)
        return self.pool.incref(b)

    def release(self, b: BlockId) -> int:
        """Drop one reference; unretained blocks go straight back to the pool."""
        rc = self.pool.decref(b)
        if rc:
            return rc
        key = self.pool.owner(b).key
        if key is not None and self.retain:
            self._idle[key] = None
            self._idle.move_to_end(key)
            return 0
        if key is not None:
            del self.index[key]
        self.pool.reclaim(b)
        return 0

    def reclaimable(self, exclude: Collection[BlockId] = ()) -> int:
        if not exclude:
            return len(self._idle)
        return sum(1 for k in self._idle if self.index[k] not in exclude)

    def reclaim_idle(self, needed: int, exclude: Collection[BlockId] = ()) -> int:
        """Free up to ``needed`` idle retained blocks, oldest release first."""
        freed = 0
        for key in list(self._idle):
            if freed >= needed:
                break
            b = self.index[key]
            if b in exclude:
                continue
            del self._idle[key]
            del self.index[key]
            self.pool.reclaim(b)
            freed += 1
        return freed

    def snapshot(self) -> tuple:
        return tuple(sorted(self.index.items())), tuple(self._idle)
