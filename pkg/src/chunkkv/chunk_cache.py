"""Canonical chunk KV objects in the shared pool, LRU eviction, and a remote tier.

A chunk's canonical blocks are its ordinals ``1..k``; ordinal 0 (the head
block) is recomputed per request context and lives in the prefix cache.
Every request that references a resident chunk maps those ordinals onto the
same block ids. Eviction works on whole chunks with zero live references, in
ascending ``(last_use, chunk_id)`` order, and offloads each victim to the
remote store before reclaiming its blocks.
"""

from __future__ import annotations

import enum
import math
import struct
from collections.abc import Collection, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from chunkkv.block_pool import PRIVATE, BlockId, BlockPool, chunk_owner
from chunkkv.errors import (
    AlreadyResident,
    InsufficientBlocks,
    NotInRemote,
    NotResident,
    OwnershipConflict,
    RecordFormatError,
    RefcountUnderflow,
)
from chunkkv.kvpage import KvPage
from chunkkv.segmentation import CHUNK_ID_BYTES, PAD, ChunkId

RECORD_FORMAT_VERSION = 1
_HEADER = struct.Struct("<I16sIIB")
_PAYLOAD_HEADER = struct.Struct("<IB")
_DTYPE_CODES = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class Tier(enum.Enum):
    HBM_RESIDENT = "hbm"
    REMOTE_ONLY = "remote"


class Residency(enum.Enum):
    RESIDENT = "resident"
    REMOTE_ONLY = "remote_only"
    MISS = "miss"


@dataclass
class ChunkEntry:
    id: ChunkId
    blocks: list[BlockId]
    refcount: int
    last_use: int
    tier: Tier
    size_blocks: int

    @property
    def evictable(self) -> bool:
        return self.tier is Tier.HBM_RESIDENT and self.refcount == 0


@dataclass(frozen=True)
class Lookup:
    residency: Residency
    entry: ChunkEntry | None = None


@dataclass
class ChunkRecord:
    """Persisted form of one chunk's canonical blocks.

    ``pages`` is ``None`` for metadata-only pools.
    """

    chunk_id: ChunkId
    block_size: int
    block_tokens: list[tuple[int, ...]]
    pages: list[KvPage] | None = None

    @property
    def k(self) -> int:
        return len(self.block_tokens)

    def to_bytes(self) -> bytes:
        if len(self.chunk_id) != CHUNK_ID_BYTES:
            raise ValueError(f"chunk id must be {CHUNK_ID_BYTES} bytes")
        out = [
            _HEADER.pack(
                RECORD_FORMAT_VERSION,
                self.chunk_id,
                self.block_size,
                self.k,
                self.pages is not None,
            )
        ]
        for toks in self.block_tokens:
            if len(toks) != self.block_size:
                raise ValueError("canonical chunk blocks must be full")
            out.append(np.asarray(toks, dtype="<u4").tobytes())
        if self.pages is not None:
            if len(self.pages) != self.k:
                raise ValueError(f"{len(self.pages)} pages for {self.k} blocks")
            dt = self.pages[0].keys.dtype
            out.append(_PAYLOAD_HEADER.pack(self.pages[0].d_head, _DTYPE_CODES[dt]))
            for page in self.pages:
                out.append(page.keys.astype(dt, copy=False).tobytes())
                out.append(page.values.astype(dt, copy=False).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> ChunkRecord:
        try:
            version, cid, bs, k, has_payload = _HEADER.unpack_from(data, 0)
        except struct.error as exc:
            raise RecordFormatError("truncated record header") from exc
        if version != RECORD_FORMAT_VERSION:
            raise RecordFormatError(f"unknown record format version {version}")
        off = _HEADER.size
        tok_bytes = k * bs * 4
        if len(data) < off + tok_bytes:
            raise RecordFormatError("truncated token metadata")
        toks = np.frombuffer(data, dtype="<u4", count=k * bs, offset=off).reshape(k, bs)
        block_tokens = [tuple(int(t) for t in row) for row in toks]
        off += tok_bytes
        pages = None
        if has_payload:
            try:
                d_head, code = _PAYLOAD_HEADER.unpack_from(data, off)
            except struct.error as exc:
                raise RecordFormatError("truncated payload header") from exc
            off += _PAYLOAD_HEADER.size
            if code not in _CODE_DTYPES:
                raise RecordFormatError(f"unknown payload dtype code {code}")
            dt = _CODE_DTYPES[code]
            n = bs * d_head
            if len(data) != off + 2 * k * n * dt.itemsize:
                raise RecordFormatError("payload size does not match header")
            pages = []
            for toks_row in block_tokens:
                keys = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(bs, d_head)
                off += n * dt.itemsize
                vals = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(bs, d_head)
                off += n * dt.itemsize
                valid = np.asarray(toks_row) != PAD
                pages.append(KvPage(keys.copy(), vals.copy(), valid))
        elif len(data) != off:
            raise RecordFormatError("trailing bytes after record")
        return cls(cid, bs, block_tokens, pages)


@dataclass
class RemoteStore:
    """CPU/disk tier standing in for an external KV store.

    Records are kept as serialized bytes (and mirrored to ``directory`` when
    set), so every fetch goes through the binary format.
    """

    bandwidth_blocks_per_tick: float = 8.0
    latency_ticks: int = 1
    directory: Path | None = None
    _records: dict[ChunkId, bytes] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.bandwidth_blocks_per_tick <= 0:
            raise ValueError("bandwidth_blocks_per_tick must be positive")
        if self.latency_ticks < 0:
            raise ValueError("latency_ticks must be non-negative")
        if self.directory is not None:
            self.directory = Path(self.directory)
            self.directory.mkdir(parents=True, exist_ok=True)

    def __contains__(self, cid: ChunkId) -> bool:
        return cid in self._records

    def __len__(self) -> int:
        return len(self._records)

    def transfer_cost(self, k: int) -> int:
        return self.latency_ticks + math.ceil(k / self.bandwidth_blocks_per_tick)

    def put(self, record: ChunkRecord) -> None:
        data = record.to_bytes()
        self._records[record.chunk_id] = data
        if self.directory is not None:
            (self.directory / f"{record.chunk_id.hex()}.chunk").write_bytes(data)

    def get(self, cid: ChunkId) -> ChunkRecord:
        data = self._records.get(cid)
        if data is None and self.directory is not None:
            path = self.directory / f"{cid.hex()}.chunk"
            if path.exists():
                data = path.read_bytes()
                self._records[cid] = data
        if data is None:
            raise NotInRemote(f"chunk {cid.hex()} has no remote record")
        return ChunkRecord.from_bytes(data)


class ChunkCache:
    """Chunk coordinator and LRU manager over the shared block pool.

    Args:
        pool: Shared block pool; its clock stamps ``last_use``.
        remote: Remote tier, or ``None`` to run HBM-only.
        offload: Write evicted chunks to ``remote`` before reclaiming them.
            With ``False`` evicted chunks are discarded.
    """

    def __init__(
        self,
        pool: BlockPool,
        remote: RemoteStore | None = None,
        offload: bool = True,
    ) -> None:
        self.pool = pool
        self.remote = remote
        self.offload = offload and remote is not None
        self.entries: dict[ChunkId, ChunkEntry] = {}
        self.eviction_log: list[ChunkId] = []

    def _resident(self, cid: ChunkId) -> ChunkEntry | None:
        e = self.entries.get(cid)
        return e if e is not None and e.tier is Tier.HBM_RESIDENT else None

    def residency(self, cid: ChunkId) -> Residency:
        """Classify ``cid`` without touching LRU state."""
        if self._resident(cid) is not None:
            return Residency.RESIDENT
        if self.remote is not None and cid in self.remote:
            return Residency.REMOTE_ONLY
        return Residency.MISS

    def lookup(self, cid: ChunkId) -> Lookup:
        e = self._resident(cid)
        if e is not None:
            e.last_use = self.pool.now
            return Lookup(Residency.RESIDENT, e)
        return Lookup(self.residency(cid), self.entries.get(cid))

    def register(
        self,
        cid: ChunkId,
        blocks: Sequence[BlockId],
        block_tokens: Sequence[Sequence[int]] | None = None,
    ) -> ChunkEntry:
        """Adopt freshly allocated blocks as chunk ``cid``'s ordinals 1..k."""
        if self._resident(cid) is not None:
            raise AlreadyResident(f"chunk {cid.hex()} is already resident")
        if not blocks:
            raise ValueError("a chunk entry needs at least one canonical block")
        if block_tokens is not None and len(block_tokens) != len(blocks):
            raise ValueError("block_tokens must match blocks")
        for b in blocks:
            if self.pool.owner(b) != PRIVATE:
                raise OwnershipConflict(f"block {b} is not a caller-held private block")
        for ordinal, b in enumerate(blocks, start=1):
            if block_tokens is not None:
                self.pool.set_tokens(b, block_tokens[ordinal - 1])
            self.pool.claim(b, chunk_owner(cid, ordinal))
        refcount = self.pool.refcount(blocks[0])
        entry = ChunkEntry(
            id=cid,
            blocks=list(blocks),
            refcount=refcount,
            last_use=self.pool.now,
            tier=Tier.HBM_RESIDENT,
            size_blocks=len(blocks),
        )
        self.entries[cid] = entry
        return entry

    def acquire(self, cid: ChunkId) -> int:
        e = self._resident(cid)
        if e is None:
            raise NotResident(f"chunk {cid.hex()} is not resident")
        for b in e.blocks:
            self.pool.incref(b)
        e.refcount += 1
        e.last_use = self.pool.now
        return e.refcount

    def release(self, cid: ChunkId) -> int:
        e = self._resident(cid)
        if e is None:
            raise NotResident(f"chunk {cid.hex()} is not resident")
        if e.refcount == 0:
            raise RefcountUnderflow(f"chunk {cid.hex()} has no references")
        for b in e.blocks:
            self.pool.decref(b)
        e.refcount -= 1
        e.last_use = self.pool.now
        return e.refcount

    def eviction_order(self, exclude: Collection[ChunkId] = ()) -> list[ChunkEntry]:
        cands = [
            e for e in self.entries.values() if e.evictable and e.id not in exclude
        ]
        cands.sort(key=lambda e: (e.last_use, e.id))
        return cands

    def evictable_blocks(self, exclude: Collection[ChunkId] = ()) -> int:
        return sum(
            e.size_blocks
            for e in self.entries.values()
            if e.evictable and e.id not in exclude
        )

    def evict_until(self, needed: int, exclude: Collection[ChunkId] = ()) -> int:
        """Evict zero-reference chunks, least recently used first.

        Stops once at least ``needed`` blocks were freed or no candidate is
        left. Returns the number of blocks freed.
        """
        if needed < 0:
            raise ValueError("needed must be non-negative")
        freed = 0
        if needed == 0:
            return 0
        for e in self.eviction_order(exclude):
            if freed >= needed:
                break
            freed += self._evict(e)
        return freed

    def record_for(self, cid: ChunkId) -> ChunkRecord:
        e = self._resident(cid)
        if e is None:
            raise NotResident(f"chunk {cid.hex()} is not resident")
        blocks = [self.pool.blocks[b] for b in e.blocks]
        if any(blk.tokens is None for blk in blocks):
            raise ValueError(f"chunk {cid.hex()} blocks carry no token metadata")
        pages = None
        if all(blk.payload is not None for blk in blocks):
            pages = [blk.payload.copy() for blk in blocks]
        return ChunkRecord(cid, self.pool.block_size, [blk.tokens for blk in blocks], pages)

    def _evict(self, e: ChunkEntry) -> int:
        if self.offload:
            self.remote.put(self.record_for(e.id))
        for b in e.blocks:
            self.pool.reclaim(b)
        freed = e.size_blocks
        self.eviction_log.append(e.id)
        if self.offload:
            e.tier = Tier.REMOTE_ONLY
            e.blocks = []
        else:
            del self.entries[e.id]
        return freed

    def fetch_cost(self, cid: ChunkId) -> int:
        e = self.entries.get(cid)
        if self.remote is None:
            raise NotInRemote("no remote tier configured")
        k = e.size_blocks if e is not None else self.remote.get(cid).k
        return self.remote.transfer_cost(k)

    def fetch_remote(self, cid: ChunkId) -> tuple[ChunkEntry, int]:
        """Restage a chunk from the remote tier into newly allocated blocks."""
        if self._resident(cid) is not None:
            raise AlreadyResident(f"chunk {cid.hex()} is already resident")
        if self.remote is None:
            raise NotInRemote("no remote tier configured")
        rec = self.remote.get(cid)
        if rec.block_size != self.pool.block_size:
            raise ValueError(
                f"record block size {rec.block_size} != pool block size {self.pool.block_size}"
            )
        if self.pool.num_free < rec.k:
            raise InsufficientBlocks(f"fetch needs {rec.k} blocks, {self.pool.num_free} free")
        blocks = self.pool.allocate(rec.k)
        for i, b in enumerate(blocks):
            if rec.pages is not None:
                self.pool.blocks[b].payload = rec.pages[i].copy()
        entry = self.register(cid, blocks, rec.block_tokens)
        return entry, self.remote.transfer_cost(rec.k)

    def snapshot(self) -> tuple:
        return tuple(
            sorted(
                (cid, tuple(e.blocks), e.refcount, e.last_use, e.tier.value)
                for cid, e in self.entries.items()
            )
        )
