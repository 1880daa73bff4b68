"""Toy single-layer KV materialization into pool pages.

The toy layer maps each position to ``h_i = e(tok_i) + mix * mean(e(ctx))``
where ``ctx`` is every real token before ``i`` in the sequence it is
computed over. Computing a chunk over its own padded tokens gives
chunk-local KV; computing it over the whole request gives the full-prefill
KV. Keys are projected without rotation (NoPE).
"""

from __future__ import annotations

import functools
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from chunkkv.errors import ShapeMismatch, SpanOutOfRange
from chunkkv.kvpage import KvPage
from chunkkv.rope import AttnConfig
from chunkkv.scheduler import DecisionKind, PolicyKind
from chunkkv.segmentation import PAD, SegmentKind


@functools.lru_cache(maxsize=65536)
def _embedding(seed: int, token: int, d_model: int) -> np.ndarray:
    vec = np.random.default_rng((seed, token)).standard_normal(d_model)
    vec.setflags(write=False)
    return vec


@dataclass
class ToyLayer:
    """Seeded single attention layer; same seed gives identical parameters."""

    config: AttnConfig = field(default_factory=lambda: AttnConfig(d_head=16))
    d_model: int = 32
    seed: int = 0
    mix: float = 0.5

    def __post_init__(self) -> None:
        rng = np.random.default_rng([self.seed, 0x5EED])
        scale = 1.0 / np.sqrt(self.d_model)
        shape = (self.d_model, self.config.d_head)
        self.w_q = rng.standard_normal(shape) * scale
        self.w_k = rng.standard_normal(shape) * scale
        self.w_v = rng.standard_normal(shape) * scale

    def embed(self, token: int) -> np.ndarray:
        return _embedding(self.seed, int(token), self.d_model)

    def hidden(self, padded_tokens: Sequence[int]) -> np.ndarray:
        """Hidden state per position; PAD rows are zero."""
        n = len(padded_tokens)
        emb = np.zeros((n, self.d_model))
        real = np.fromiter((t != PAD for t in padded_tokens), dtype=bool, count=n)
        for i in np.flatnonzero(real):
            emb[i] = self.embed(padded_tokens[i])
        # Exclusive prefix sums give the mean over strictly earlier real tokens.
        csum = np.cumsum(emb, axis=0) - emb
        count = np.cumsum(real) - real
        ctx = np.divide(csum, count[:, None], out=np.zeros_like(csum), where=count[:, None] > 0)
        h = emb + self.mix * ctx
        h[~real] = 0.0
        return h

    def project(self, padded_tokens: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(q, k_nope, v)`` for every position, in the config dtype."""
        h = self.hidden(padded_tokens)
        dt = self.config.np_dtype
        return (h @ self.w_q).astype(dt), (h @ self.w_k).astype(dt), (h @ self.w_v).astype(dt)

    def new_page(self, block_size: int) -> KvPage:
        return KvPage.zeros(block_size, self.config.d_head, self.config.dtype)


def materialize_segment(
    layer: ToyLayer,
    padded_tokens: Sequence[int],
    recompute_spans: Sequence[tuple[int, int]],
    pages: Sequence[KvPage],
) -> None:
    """Write NoPE K/V for the positions in ``recompute_spans`` into ``pages``.

    ``pages[j]`` holds positions ``[j*bs, (j+1)*bs)`` of ``padded_tokens``,
    which is also the attention context. Slots outside the spans are left
    untouched; PAD slots inside them are zeroed and masked.

    Raises:
        SpanOutOfRange: If a span leaves the sequence or the given pages.
    """
    n = len(padded_tokens)
    if not pages:
        if any(b > a for a, b in recompute_spans):
            raise SpanOutOfRange("no pages to write into")
        return
    bs = pages[0].block_size
    for a, b in recompute_spans:
        if not 0 <= a <= b <= n or b > len(pages) * bs:
            raise SpanOutOfRange(f"span [{a}, {b}) outside sequence of {n} / {len(pages)} pages")
    if not any(b > a for a, b in recompute_spans):
        return
    _, k, v = layer.project(padded_tokens)
    for a, b in recompute_spans:
        for i in range(a, b):
            page, slot = pages[i // bs], i % bs
            if padded_tokens[i] == PAD:
                page.keys[slot] = 0
                page.values[slot] = 0
                page.valid[slot] = False
            else:
                page.keys[slot] = k[i]
                page.values[slot] = v[i]
                page.valid[slot] = True


def kv_deviation(full_pages: Sequence[KvPage], reused_pages: Sequence[KvPage]) -> np.ndarray:
    """Per-block L2 norm of the key and value differences.

    Raises:
        ShapeMismatch: If the two page lists do not line up.
    """
    if len(full_pages) != len(reused_pages):
        raise ShapeMismatch(f"{len(full_pages)} pages vs {len(reused_pages)}")
    out = np.zeros(len(full_pages))
    for j, (f, r) in enumerate(zip(full_pages, reused_pages)):
        if f.keys.shape != r.keys.shape or f.values.shape != r.values.shape:
            raise ShapeMismatch(f"page {j}: {f.keys.shape} vs {r.keys.shape}")
        dk = f.keys.astype(np.float64) - r.keys.astype(np.float64)
        dv = f.values.astype(np.float64) - r.values.astype(np.float64)
        out[j] = np.sqrt(np.sum(dk * dk) + np.sum(dv * dv))
    return out


def chunk_local_tokens(layout, span_index: int) -> tuple[int, ...]:
    span = layout.spans[span_index]
    return layout.padded_tokens[span.start : span.end]


def reference_pages(layer: ToyLayer, layout, local_chunk_bodies: bool = False) -> list[KvPage]:
    """Fresh pages for a whole layout.

    With ``local_chunk_bodies`` the blocks after each chunk's first block are
    computed over the chunk alone; everything else sees the full request.
    """
    bs = layout.block_size
    pages = [layer.new_page(bs) for _ in range(layout.n_blocks)]
    materialize_segment(layer, layout.padded_tokens, [(0, len(layout))], pages)
    if local_chunk_bodies:
        for si, span in enumerate(layout.spans):
            if span.kind is SegmentKind.CHUNK and span.end - span.start > bs:
                b0, b1 = span.start // bs, span.end // bs
                local = chunk_local_tokens(layout, si)
                materialize_segment(layer, local, [(bs, len(local))], pages[b0:b1])
    return pages


def execute_plan(layer: ToyLayer, pool, plan) -> list[KvPage]:
    """Fill the plan's freshly computed slots in the pool's block payloads.

    Canonical chunk bodies are computed over the chunk alone and written to
    the chunk's shared blocks; reused pages are not written. Baseline staged
    copies get the chunk-alone KV first, then the policy's recompute spans
    overwrite their slots with full-context KV. Returns the page table.
    """
    layout = plan.layout
    bs = layout.block_size
    pages = [pool.blocks[b].payload for b in plan.block_table]
    if any(p is None for p in pages):
        raise ValueError("pool blocks carry no KV payload; build the engine with a payload factory")
    canonical = plan.policy.kind is PolicyKind.CANONICAL
    local_blocks: set[int] = set()
    for d in plan.decisions:
        if d.chunk_id is None:
            continue
        first, nb = d.first_block, d.n_blocks
        local = chunk_local_tokens(layout, d.span_index)
        if canonical:
            local_blocks.update(range(first + 1, first + nb))
            if d.kind is DecisionKind.CHUNK_NEW and nb > 1:
                materialize_segment(layer, local, [(bs, len(local))], pages[first : first + nb])
        elif d.kind is DecisionKind.CHUNK_FETCHED:
            materialize_segment(layer, local, [(0, len(local))], pages[first : first + nb])

    pieces: list[tuple[int, int]] = []
    for a, b in plan.recompute_spans:
        i = a
        while i < b:
            blk_end = min(b, (i // bs + 1) * bs)
            if i // bs not in local_blocks:
                pieces.append((i, blk_end))
            i = blk_end
    materialize_segment(layer, layout.padded_tokens, pieces, pages)
    return pages
