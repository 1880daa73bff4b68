"""Hybrid KV manager: turns a segmented request into a block placement plan.

Scheduling runs in a fixed order: canonicalize the request, resolve the
residency of every block against the prefix and chunk caches, check that
free plus evictable blocks cover the demand, and only then evict and
allocate. A rejected request leaves every cache exactly as it was.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from chunkkv.block_pool import BlockId, BlockPool, OwnerKind, PoolConfig
from chunkkv.chunk_cache import ChunkCache, ChunkRecord, RemoteStore, Residency, Tier
from chunkkv.errors import DoubleRelease, KvCacheError
from chunkkv.prefix_cache import ROOT_KEY, PrefixCache, PrefixKey, chain_key
from chunkkv.segmentation import (
    PAD,
    AlignedLayout,
    ChunkId,
    Segment,
    SegmentKind,
    canonicalize,
    chunk_id,
)


class PolicyKind(enum.Enum):
    NAIVE = "naive"
    FULL_RECOMPUTE = "full"
    CACHEBLEND = "cacheblend"
    EPIC = "epic"
    CANONICAL = "canonical"


class Sharing(enum.Enum):
    SHARED_CANONICAL = "shared_canonical"
    PRIVATE_PER_REQUEST = "private_per_request"


@dataclass(frozen=True)
class Policy:
    """Chunk reuse policy.

    ``recompute_fraction`` applies to CACHEBLEND, ``recompute_tokens`` to
    EPIC; ``seed`` drives CACHEBLEND's token selection.
    """

    kind: PolicyKind
    recompute_fraction: float = 0.15
    recompute_tokens: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.recompute_fraction <= 1.0:
            raise ValueError(f"recompute_fraction must be in [0, 1], got {self.recompute_fraction}")
        if self.recompute_tokens < 0:
            raise ValueError(f"recompute_tokens must be >= 0, got {self.recompute_tokens}")

    @classmethod
    def naive(cls) -> Policy:
        return cls(PolicyKind.NAIVE)

    @classmethod
    def full_recompute(cls) -> Policy:
        return cls(PolicyKind.FULL_RECOMPUTE)

    @classmethod
    def cacheblend(cls, p: float = 0.15, seed: int = 0) -> Policy:
        return cls(PolicyKind.CACHEBLEND, recompute_fraction=p, seed=seed)

    @classmethod
    def epic(cls, n: int = 16) -> Policy:
        return cls(PolicyKind.EPIC, recompute_tokens=n)

    @classmethod
    def canonical(cls) -> Policy:
        return cls(PolicyKind.CANONICAL)

    @property
    def name(self) -> str:
        if self.kind is PolicyKind.CACHEBLEND:
            return f"cacheblend({self.recompute_fraction:g})"
        if self.kind is PolicyKind.EPIC:
            return f"epic({self.recompute_tokens})"
        return self.kind.value

    @property
    def sharing(self) -> Sharing:
        return sharing_semantics(self)


def sharing_semantics(policy: Policy) -> Sharing:
    if policy.kind is PolicyKind.CANONICAL:
        return Sharing.SHARED_CANONICAL
    return Sharing.PRIVATE_PER_REQUEST


class ChunkStatus(enum.Enum):
    NEW = "new"  # no reusable KV; compute from scratch
    CACHED = "cached"  # reusable KV available (shared in HBM or staged copy)


@dataclass(frozen=True)
class ChunkResidency:
    """Residency of one chunk segment, as seen by the recompute policy."""

    status: ChunkStatus
    head_hit: bool = False
    chunk_id: ChunkId = b""


def _ceil_fraction(p: float, n: int) -> int:
    # round() first so that e.g. 0.15 * 100 counts as exactly 15
    return math.ceil(round(p * n, 9))


def policy_recompute_spans(
    policy: Policy, layout: AlignedLayout, residency: Sequence[ChunkResidency]
) -> list[tuple[int, int]]:
    """Padded-coordinate spans each policy recomputes inside chunk segments.

    ``residency`` lines up with the layout's chunk segments in order.
    """
    chunk_spans = [s for s in layout.spans if s.kind is SegmentKind.CHUNK]
    if len(chunk_spans) != len(residency):
        raise ValueError(f"{len(residency)} residencies for {len(chunk_spans)} chunk segments")
    bs = layout.block_size
    out: list[tuple[int, int]] = []
    for span, res in zip(chunk_spans, residency):
        t0, t1 = span.token_span
        if policy.kind is PolicyKind.CANONICAL:
            if res.status is ChunkStatus.NEW:
                out.append((span.start + bs if res.head_hit else span.start, span.end))
            elif not res.head_hit:
                out.append((span.start, span.start + bs))
            continue
        if res.status is ChunkStatus.NEW or policy.kind is PolicyKind.FULL_RECOMPUTE:
            out.append((t0, t1))
        elif policy.kind is PolicyKind.EPIC:
            out.append((t0, t0 + min(policy.recompute_tokens, t1 - t0)))
        elif policy.kind is PolicyKind.CACHEBLEND:
            n = t1 - t0
            count = _ceil_fraction(policy.recompute_fraction, n)
            salt = int.from_bytes(res.chunk_id[:8], "little")
            rng = np.random.default_rng([policy.seed, salt])
            picks = np.sort(rng.choice(n, size=count, replace=False)) + t0
            out.extend((int(p), int(p) + 1) for p in picks)
    return merge_spans(s for s in out if s[1] > s[0])


def merge_spans(spans: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[tuple[int, int]] = []
    for a, b in sorted(spans):
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return merged


def count_real_tokens(padded_tokens: Sequence[int], spans: Iterable[tuple[int, int]]) -> int:
    return sum(1 for a, b in spans for t in padded_tokens[a:b] if t != PAD)


@dataclass(frozen=True)
class Request:
    request_id: str
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise ValueError("request needs at least one segment")


class SlotAction(enum.Enum):
    HIT = "hit"  # reuse an indexed prefix block
    SHARED = "shared"  # canonical chunk block already resident
    NEW = "new"  # allocate from the pool
    FETCH = "fetch"  # allocate and restage from the remote tier


class SlotRole(enum.Enum):
    PREFIX = "prefix"  # full block indexed under its chain key
    HEAD = "head"  # chunk ordinal 0, indexed under the request's chain
    PRIVATE = "private"  # request-private, never indexed
    CHUNK = "chunk"  # canonical chunk ordinal >= 1


@dataclass
class BlockSlot:
    """Residency decision for one block of the padded layout."""

    action: SlotAction
    role: SlotRole
    key: PrefixKey | None = None
    block: BlockId | None = None
    chunk_id: ChunkId | None = None
    ordinal: int = 0


def estimate_demand(slots: Iterable[BlockSlot]) -> int:
    """Blocks that must come out of the pool for a set of slot decisions."""
    return sum(1 for s in slots if s.action in (SlotAction.NEW, SlotAction.FETCH))


class DecisionKind(enum.Enum):
    PREFIX_HIT = "prefix_hit"
    CHUNK_SHARED = "chunk_shared"
    CHUNK_NEW = "chunk_new"
    CHUNK_FETCHED = "chunk_fetched"
    RECOMPUTE = "recompute"


@dataclass
class SegmentDecision:
    kind: DecisionKind
    span_index: int
    first_block: int
    n_blocks: int
    chunk_id: ChunkId | None = None
    head_hit: bool = False
    fetch_cost: int = 0
    private: bool = False
    blocks: list[BlockId] = field(default_factory=list)

    @property
    def head_block(self) -> BlockId | None:
        return self.blocks[0] if self.chunk_id is not None and self.blocks else None


@dataclass
class PlanCost:
    """Per-request accounting.

    ``new_blocks`` counts every block the plan allocated, including ones
    filled from the remote tier; ``fetched_blocks`` is that remote subset.
    ``recomputed_tokens`` skips PAD slots, ``recomputed_slots`` does not.
    """

    recomputed_tokens: int = 0
    recomputed_slots: int = 0
    fetched_blocks: int = 0
    new_blocks: int = 0
    shared_blocks: int = 0
    fetch_ticks: int = 0
    prefix_lookups: int = 0
    prefix_hits: int = 0
    chunk_refs: int = 0
    chunk_eligible: int = 0
    chunk_hits: int = 0


@dataclass
class PlacementPlan:
    request_id: str
    policy: Policy
    layout: AlignedLayout
    clock: int
    decisions: list[SegmentDecision]
    block_table: list[BlockId]
    recompute_spans: list[tuple[int, int]]
    cost: PlanCost
    prefix_refs: list[BlockId] = field(default_factory=list)
    chunk_refs: list[ChunkId] = field(default_factory=list)
    released: bool = False

    def block_map(self, i: int) -> tuple[BlockId, int]:
        """Physical (block, slot) holding padded token ``i``."""
        if not 0 <= i < len(self.layout):
            raise IndexError(f"token {i} outside layout of {len(self.layout)}")
        bs = self.layout.block_size
        return self.block_table[i // bs], i % bs

    @property
    def n_blocks(self) -> int:
        return len(set(self.block_table))

    def chunk_blocks(self) -> dict[ChunkId, list[BlockId]]:
        """Blocks backing each chunk's ordinals 1..k in this plan."""
        out: dict[ChunkId, list[BlockId]] = {}
        for d in self.decisions:
            if d.chunk_id is not None:
                out.setdefault(d.chunk_id, []).extend(d.blocks[1:])
        return out


@dataclass(frozen=True)
class Admitted:
    plan: PlacementPlan
    admitted: bool = True


@dataclass(frozen=True)
class Rejected:
    demand: int
    available: int
    reason: str = "InsufficientEvenAfterEviction"
    admitted: bool = False


AdmissionOutcome = Admitted | Rejected

REMOTE_POLICIES = ("always_fetch", "always_recompute", "cost_based")


@dataclass
class _Draft:
    layout: AlignedLayout
    slots: list[BlockSlot]
    decisions: list[SegmentDecision]
    residency: list[ChunkResidency]
    chunk_ids: dict[int, ChunkId]
    staged: dict[int, int]  # span index -> baseline staging cost
    demand: int


class KvEngine:
    """Block pool, prefix cache, chunk cache, and remote tier under one scheduler.

    Args:
        pool_config: Pool capacity and block size.
        remote: Remote tier. Defaults to an in-memory store; pass ``None``
            together with ``offload=False`` for HBM-only runs.
        offload: Offload evicted chunks to the remote tier.
        retain_prefix: Keep zero-reference prefix blocks indexed until
            memory pressure reclaims them.
        remote_policy: What to do with a chunk that only exists remotely:
            ``always_fetch``, ``always_recompute``, or ``cost_based``
            (fetch when the transfer is cheaper than recomputing).
        prefill_ticks_per_token: Recompute cost used by ``cost_based``.
        payload_factory: Attach KV pages to blocks (numeric runs).
    """

    def __init__(
        self,
        pool_config: PoolConfig,
        *,
        remote: RemoteStore | None | bool = True,
        offload: bool = True,
        retain_prefix: bool = False,
        remote_policy: str = "cost_based",
        prefill_ticks_per_token: float = 0.05,
        payload_factory=None,
    ) -> None:
        if remote_policy not in REMOTE_POLICIES:
            raise ValueError(f"remote_policy must be one of {REMOTE_POLICIES}")
        if remote is True:
            remote = RemoteStore()
        elif remote is False:
            remote = None
        self.pool = BlockPool(pool_config, payload_factory=payload_factory)
        self.remote = remote
        self.prefix = PrefixCache(self.pool, retain=retain_prefix)
        self.chunks = ChunkCache(self.pool, remote=remote, offload=offload)
        self.remote_policy = remote_policy
        self.prefill_ticks_per_token = prefill_ticks_per_token
        self.seen_chunks: set[ChunkId] = set()

    @property
    def block_size(self) -> int:
        return self.pool.block_size

    # -- planning (read-only) -------------------------------------------------

    def _should_fetch(self, layout: AlignedLayout, span, cid: ChunkId) -> bool:
        if self.remote_policy == "always_fetch":
            return True
        if self.remote_policy == "always_recompute":
            return False
        bs = layout.block_size
        body = layout.padded_tokens[span.start + bs : span.end]
        recompute = sum(1 for t in body if t != PAD) * self.prefill_ticks_per_token
        return self.chunks.fetch_cost(cid) < recompute

    def plan(self, request: Request, policy: Policy) -> _Draft:
        bs = self.block_size
        layout = canonicalize(request.segments, bs)
        slots: list[BlockSlot] = []
        decisions: list[SegmentDecision] = []
        residency: list[ChunkResidency] = []
        chunk_ids: dict[int, ChunkId] = {}
        staged: dict[int, int] = {}
        canonical = policy.kind is PolicyKind.CANONICAL
        in_plan: set[ChunkId] = set()
        chain = ROOT_KEY
        leading = True  # baselines only index the prompt prefix before any chunk

        for si, (seg, span) in enumerate(zip(request.segments, layout.spans)):
            b0 = span.start // bs
            nb = -(-(span.end - span.start) // bs)
            if not seg.is_chunk:
                hits = 0
                for b in range(b0, b0 + nb):
                    toks = layout.block_tokens(b)
                    full = len(toks) == bs
                    if full and (canonical or leading):
                        chain = chain_key(chain, toks)
                        hit = self.prefix.lookup(chain, toks)
                        if hit is not None:
                            slots.append(BlockSlot(SlotAction.HIT, SlotRole.PREFIX, chain, hit))
                            hits += 1
                        else:
                            slots.append(BlockSlot(SlotAction.NEW, SlotRole.PREFIX, chain))
                    else:
                        if full:
                            chain = chain_key(chain, toks)
                        slots.append(BlockSlot(SlotAction.NEW, SlotRole.PRIVATE))
                kind = DecisionKind.PREFIX_HIT if hits == nb else DecisionKind.RECOMPUTE
                decisions.append(SegmentDecision(kind, si, b0, nb))
                continue

            leading = False
            cid = chunk_id(seg, bs)
            chunk_ids[si] = cid
            k = nb - 1
            if not canonical:
                # Full recompute never reuses a copy, so it never stages one.
                cached = (
                    policy.kind is not PolicyKind.FULL_RECOMPUTE
                    and self.remote is not None
                    and cid in self.remote
                )
                status = ChunkStatus.CACHED if cached else ChunkStatus.NEW
                residency.append(ChunkResidency(status, chunk_id=cid))
                for b in range(b0, b0 + nb):
                    chain = chain_key(chain, layout.block_tokens(b))
                    slots.append(BlockSlot(SlotAction.NEW, SlotRole.PRIVATE, chunk_id=cid))
                if cached:
                    staged[si] = self.remote.transfer_cost(nb)
                kind = DecisionKind.CHUNK_FETCHED if cached else DecisionKind.CHUNK_NEW
                decisions.append(
                    SegmentDecision(kind, si, b0, nb, cid, fetch_cost=staged.get(si, 0), private=True)
                )
                continue

            head_toks = layout.block_tokens(b0)
            chain = chain_key(chain, head_toks)
            head = self.prefix.lookup(chain, head_toks)
            if head is not None:
                slots.append(BlockSlot(SlotAction.HIT, SlotRole.HEAD, chain, head, cid, 0))
            else:
                slots.append(BlockSlot(SlotAction.NEW, SlotRole.HEAD, chain, chunk_id=cid))
            for b in range(b0 + 1, b0 + nb):
                chain = chain_key(chain, layout.block_tokens(b))
            head_hit = head is not None

            if k == 0:
                status = ChunkStatus.CACHED if head_hit else ChunkStatus.NEW
                residency.append(ChunkResidency(status, head_hit, cid))
                kind = DecisionKind.PREFIX_HIT if head_hit else DecisionKind.CHUNK_NEW
                decisions.append(SegmentDecision(kind, si, b0, nb, cid, head_hit=head_hit))
                continue

            res = Residency.RESIDENT if cid in in_plan else self.chunks.residency(cid)
            fetch_cost = 0
            if res is Residency.RESIDENT:
                action, kind, status = SlotAction.SHARED, DecisionKind.CHUNK_SHARED, ChunkStatus.CACHED
            elif res is Residency.REMOTE_ONLY and self._should_fetch(layout, span, cid):
                action, kind, status = SlotAction.FETCH, DecisionKind.CHUNK_FETCHED, ChunkStatus.CACHED
                fetch_cost = self.chunks.fetch_cost(cid)
            else:
                action, kind, status = SlotAction.NEW, DecisionKind.CHUNK_NEW, ChunkStatus.NEW
            in_plan.add(cid)
            for ordinal in range(1, k + 1):
                slots.append(BlockSlot(action, SlotRole.CHUNK, chunk_id=cid, ordinal=ordinal))
            residency.append(ChunkResidency(status, head_hit, cid))
            decisions.append(
                SegmentDecision(kind, si, b0, nb, cid, head_hit=head_hit, fetch_cost=fetch_cost)
            )

        return _Draft(layout, slots, decisions, residency, chunk_ids, staged, estimate_demand(slots))

    def available_blocks(self, draft: _Draft) -> int:
        """Free blocks plus what eviction could reclaim without touching ``draft``'s reuse."""
        shared = {s.chunk_id for s in draft.slots if s.action is SlotAction.SHARED}
        hits = {s.block for s in draft.slots if s.action is SlotAction.HIT}
        avail = self.pool.num_free + self.chunks.evictable_blocks(exclude=shared)
        if self.prefix.retain:
            avail += self.prefix.reclaimable(exclude=hits)
        return avail

    # -- admission and commit -------------------------------------------------

    def schedule(self, request: Request, policy: Policy, clock: int) -> AdmissionOutcome:
        if clock < self.pool.now:
            raise ValueError(f"clock went backwards: {clock} < {self.pool.now}")
        draft = self.plan(request, policy)
        available = self.available_blocks(draft)
        if draft.demand > available:
            return Rejected(draft.demand, available)
        self.pool.advance(clock)
        return Admitted(self._commit(request, policy, draft, clock))

    def _commit(self, request: Request, policy: Policy, draft: _Draft, clock: int) -> PlacementPlan:
        layout = draft.layout
        bs = layout.block_size
        slots = draft.slots
        cost = PlanCost()
        plan = PlacementPlan(
            request_id=request.request_id,
            policy=policy,
            layout=layout,
            clock=clock,
            decisions=draft.decisions,
            block_table=[-1] * len(slots),
            recompute_spans=[],
            cost=cost,
        )

        # Pin everything this request reuses before eviction can run.
        for i, s in enumerate(slots):
            if s.action is SlotAction.HIT:
                self.prefix.acquire(s.block)
                plan.prefix_refs.append(s.block)
                plan.block_table[i] = s.block
                cost.shared_blocks += 1
        shared_chunks: list[ChunkId] = []
        for d in draft.decisions:
            if d.kind is DecisionKind.CHUNK_SHARED and self.chunks.residency(d.chunk_id) is Residency.RESIDENT:
                self.chunks.lookup(d.chunk_id)
                self.chunks.acquire(d.chunk_id)
                plan.chunk_refs.append(d.chunk_id)
                shared_chunks.append(d.chunk_id)

        shortfall = draft.demand - self.pool.num_free
        if shortfall > 0:
            shortfall -= self.chunks.evict_until(shortfall)
        if shortfall > 0 and self.prefix.retain:
            shortfall -= self.prefix.reclaim_idle(shortfall)
        if shortfall > 0:
            raise KvCacheError("admission probe passed but eviction fell short")

        registered: dict[ChunkId, list[BlockId]] = {}
        for d in draft.decisions:
            first = d.first_block
            seg_slots = range(first, first + d.n_blocks)
            cid = d.chunk_id
            if d.kind is DecisionKind.CHUNK_FETCHED and not d.private:
                entry, ticks = self.chunks.fetch_remote(cid)
                plan.chunk_refs.append(cid)
                registered[cid] = entry.blocks
                cost.fetched_blocks += entry.size_blocks
                cost.new_blocks += entry.size_blocks
                cost.fetch_ticks += ticks
            elif d.kind is DecisionKind.CHUNK_SHARED and cid not in shared_chunks and cid in registered:
                # Repeat of a chunk first materialized earlier in this same request.
                self.chunks.acquire(cid)
                plan.chunk_refs.append(cid)
            elif d.kind is DecisionKind.CHUNK_SHARED and cid not in registered:
                registered[cid] = self.chunks.entries[cid].blocks
            if d.private and d.kind is DecisionKind.CHUNK_FETCHED:
                cost.fetched_blocks += d.n_blocks
                cost.fetch_ticks += d.fetch_cost

            for i in seg_slots:
                s = slots[i]
                toks = layout.block_tokens(i)
                if s.action is SlotAction.HIT:
                    continue
                if s.role is SlotRole.CHUNK:
                    if s.action is SlotAction.NEW and cid not in registered:
                        blocks = self.pool.allocate(d.n_blocks - 1)
                        self.chunks.register(
                            cid, blocks, [layout.block_tokens(j) for j in range(first + 1, first + d.n_blocks)]
                        )
                        plan.chunk_refs.append(cid)
                        registered[cid] = blocks
                        cost.new_blocks += len(blocks)
                    elif s.action is SlotAction.SHARED:
                        cost.shared_blocks += 1
                    plan.block_table[i] = registered[cid][s.ordinal - 1]
                    continue
                b = self.pool.allocate(1)[0]
                cost.new_blocks += 1
                plan.prefix_refs.append(b)
                plan.block_table[i] = b
                if s.role is SlotRole.PRIVATE:
                    self.pool.set_tokens(b, toks)
                else:
                    self.prefix.insert_block(s.key, toks, b)

            d.blocks = plan.block_table[first : first + d.n_blocks]
            if d.private and d.kind is DecisionKind.CHUNK_NEW and self.remote is not None:
                # Baselines keep a reusable copy of chunk KV off-device.
                body = [layout.block_tokens(j) for j in range(first + 1, first + d.n_blocks)]
                if cid not in self.remote and body:
                    self.remote.put(ChunkRecord(cid, bs, body))

        # Prompt recompute spans: real tokens of every prompt block that missed.
        spans: list[tuple[int, int]] = []
        for d in draft.decisions:
            span = layout.spans[d.span_index]
            if span.kind is SegmentKind.CHUNK:
                continue
            t0, t1 = span.token_span
            for i in range(d.first_block, d.first_block + d.n_blocks):
                if slots[i].action is not SlotAction.HIT:
                    a, b = max(i * bs, t0), min((i + 1) * bs, t1)
                    if b > a:
                        spans.append((a, b))
        spans.extend(policy_recompute_spans(policy, layout, draft.residency))
        plan.recompute_spans = merge_spans(spans)
        cost.recomputed_slots = sum(b - a for a, b in plan.recompute_spans)
        cost.recomputed_tokens = count_real_tokens(layout.padded_tokens, plan.recompute_spans)

        for s in slots:
            if s.role in (SlotRole.PREFIX, SlotRole.HEAD):
                cost.prefix_lookups += 1
                cost.prefix_hits += s.action is SlotAction.HIT
        for d in draft.decisions:
            if d.chunk_id is None or d.n_blocks < 2:
                continue
            cost.chunk_refs += 1
            if d.chunk_id in self.seen_chunks:
                cost.chunk_eligible += 1
                cost.chunk_hits += d.kind is DecisionKind.CHUNK_SHARED
            self.seen_chunks.add(d.chunk_id)
        assert -1 not in plan.block_table
        return plan

    def release_request(self, plan: PlacementPlan, clock: int | None = None) -> None:
        """Drop every reference the plan took; chunk KV stays resident."""
        if plan.released:
            raise DoubleRelease(f"request {plan.request_id} was already released")
        if clock is not None:
            self.pool.advance(clock)
        for b in plan.prefix_refs:
            self.prefix.release(b)
        for cid in plan.chunk_refs:
            self.chunks.release(cid)
        plan.released = True

    # -- introspection ---------------------------------------------------------

    def snapshot(self) -> tuple:
        remote = tuple(sorted(self.remote._records)) if self.remote is not None else ()
        return (
            self.pool.snapshot(),
            self.prefix.snapshot(),
            self.chunks.snapshot(),
            remote,
            tuple(sorted(self.seen_chunks)),
        )

    def check_invariants(self) -> None:
        """Assert pool conservation, single ownership, and index consistency."""
        stats = self.pool.audit()
        assert stats.capacity == self.pool.capacity
        owners: dict[BlockId, str] = {}
        for key, b in self.prefix.index.items():
            assert b not in owners, f"block {b} indexed twice"
            owners[b] = "prefix"
            owner = self.pool.owner(b)
            assert owner.kind is OwnerKind.PREFIX and owner.key == key
        for cid, e in self.chunks.entries.items():
            if e.tier is not Tier.HBM_RESIDENT:
                assert not e.blocks and e.refcount == 0
                continue
            assert e.blocks, f"resident chunk {cid.hex()} has no blocks"
            for ordinal, b in enumerate(e.blocks, start=1):
                assert b not in owners, f"block {b} owned by {owners[b]} and a chunk"
                owners[b] = "chunk"
                owner = self.pool.owner(b)
                assert owner.kind is OwnerKind.CHUNK
                assert (owner.key, owner.ordinal) == (cid, ordinal)
                assert self.pool.refcount(b) == e.refcount
