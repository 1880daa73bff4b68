"""Request segmentation, asymmetric block padding, and chunk identity.

Chunk segments get *leading* PAD tokens and prompt segments get *trailing*
PAD tokens so that every chunk starts on a block boundary; the final prompt
segment is never padded. Because the padding amount depends only on the
segment length and block size, the padded form of a chunk is the same in
every request that contains it.
"""

from __future__ import annotations

import enum
import hashlib
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from chunkkv.errors import AmbiguousPadding, MalformedMarkers

PAD = 0
# In-band markers; negative so they can never collide with token ids.
CHUNK_BEGIN = -1
CHUNK_END = -2

ChunkId = bytes
CHUNK_ID_BYTES = 16
# Bumped whenever the digest input layout changes; persisted in remote records.
HASH_FORMAT_VERSION = 1


class SegmentKind(enum.Enum):
    CHUNK = "chunk"
    PROMPT = "prompt"


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError("segment must contain at least one token")
        if min(self.tokens) < 1:
            raise ValueError("raw segment tokens must be >= 1 (0 is reserved for PAD)")

    @classmethod
    def chunk(cls, tokens: Iterable[int]) -> Segment:
        return cls(SegmentKind.CHUNK, tuple(int(t) for t in tokens))

    @classmethod
    def prompt(cls, tokens: Iterable[int]) -> Segment:
        return cls(SegmentKind.PROMPT, tuple(int(t) for t in tokens))

    @property
    def is_chunk(self) -> bool:
        return self.kind is SegmentKind.CHUNK

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SegmentSpan:
    kind: SegmentKind
    raw_span: tuple[int, int]
    padded_span: tuple[int, int]
    pad_prefix_len: int
    pad_suffix_len: int

    @property
    def start(self) -> int:
        return self.padded_span[0]

    @property
    def end(self) -> int:
        return self.padded_span[1]

    @property
    def raw_len(self) -> int:
        return self.raw_span[1] - self.raw_span[0]

    @property
    def token_span(self) -> tuple[int, int]:
        """Padded-coordinate span of the real (non-PAD) tokens."""
        return self.start + self.pad_prefix_len, self.end - self.pad_suffix_len


@dataclass(frozen=True)
class AlignedLayout:
    padded_tokens: tuple[int, ...]
    spans: tuple[SegmentSpan, ...]
    block_size: int

    def __len__(self) -> int:
        return len(self.padded_tokens)

    @property
    def n_blocks(self) -> int:
        return -(-len(self.padded_tokens) // self.block_size)

    def block_tokens(self, i: int) -> tuple[int, ...]:
        bs = self.block_size
        return self.padded_tokens[i * bs : (i + 1) * bs]

    def is_full_block(self, i: int) -> bool:
        return (i + 1) * self.block_size <= len(self.padded_tokens)


def pad_len(n: int, block_size: int) -> int:
    """PAD tokens needed to round ``n`` up to a multiple of ``block_size``."""
    return (block_size - n % block_size) % block_size


def segment(marked: Sequence[int]) -> list[Segment]:
    """Split a marker-annotated token stream into chunk and prompt segments.

    Tokens between ``CHUNK_BEGIN`` and ``CHUNK_END`` form a chunk; every
    maximal run outside markers forms a prompt. A request without markers is
    a single prompt segment.
    """
    segments: list[Segment] = []
    buf: list[int] = []
    in_chunk = False
    for tok in marked:
        if tok == CHUNK_BEGIN:
            if in_chunk:
                raise MalformedMarkers("nested CHUNK_BEGIN")
            if buf:
                segments.append(Segment.prompt(buf))
                buf = []
            in_chunk = True
        elif tok == CHUNK_END:
            if not in_chunk:
                raise MalformedMarkers("CHUNK_END without CHUNK_BEGIN")
            if not buf:
                raise MalformedMarkers("empty chunk segment")
            segments.append(Segment.chunk(buf))
            buf = []
            in_chunk = False
        else:
            if tok < 1:
                raise MalformedMarkers(f"invalid token id {tok} in request")
            buf.append(tok)
    if in_chunk:
        raise MalformedMarkers("unclosed CHUNK_BEGIN")
    if buf:
        segments.append(Segment.prompt(buf))
    if not segments:
        raise MalformedMarkers("request contains no tokens")
    return segments


def canonicalize(segments: Sequence[Segment], block_size: int) -> AlignedLayout:
    if not segments:
        raise ValueError("cannot canonicalize an empty request")
    if block_size <= 0:
        raise ValueError(f"block_size must be positive, got {block_size}")
    padded: list[int] = []
    spans: list[SegmentSpan] = []
    raw_pos = 0
    last = len(segments) - 1
    for i, seg in enumerate(segments):
        pad = pad_len(len(seg), block_size)
        if seg.is_chunk:
            pre, suf = pad, 0
        else:
            pre, suf = 0, (0 if i == last else pad)
        start = len(padded)
        padded.extend([PAD] * pre)
        padded.extend(seg.tokens)
        padded.extend([PAD] * suf)
        spans.append(
            SegmentSpan(
                kind=seg.kind,
                raw_span=(raw_pos, raw_pos + len(seg)),
                padded_span=(start, len(padded)),
                pad_prefix_len=pre,
                pad_suffix_len=suf,
            )
        )
        raw_pos += len(seg)
    return AlignedLayout(tuple(padded), tuple(spans), block_size)


def padded_chunk_tokens(tokens: Sequence[int], block_size: int) -> tuple[int, ...]:
    return (PAD,) * pad_len(len(tokens), block_size) + tuple(tokens)


def tokens_to_bytes(tokens: Sequence[int]) -> bytes:
    return np.asarray(tokens, dtype="<u4").tobytes()


def chunk_id(chunk: Segment, block_size: int) -> ChunkId:
    """128-bit BLAKE2b digest of the block size and the padded chunk tokens."""
    if not chunk.is_chunk:
        raise ValueError("chunk_id() requires a chunk segment")
    h = hashlib.blake2b(digest_size=CHUNK_ID_BYTES, person=b"chunkkv-chunk")
    h.update(np.asarray([HASH_FORMAT_VERSION, block_size], dtype="<u4").tobytes())
    h.update(tokens_to_bytes(padded_chunk_tokens(chunk.tokens, block_size)))
    return h.digest()


def _pad_runs(tokens: Sequence[int]) -> list[tuple[int, int]]:
    runs = []
    i, n = 0, len(tokens)
    while i < n:
        if tokens[i] == PAD:
            j = i
            while j < n and tokens[j] == PAD:
                j += 1
            runs.append((i, j))
            i = j
        else:
            i += 1
    return runs


def infer_spans(
    padded_tokens: Sequence[int], block_size: int
) -> list[tuple[SegmentKind, tuple[int, int]]]:
    """Recover segment kinds from the PAD pattern alone.

    A PAD run starting on a block boundary and ending mid-block opens a chunk;
    a run ending on a boundary closes a prompt; a run straddling exactly one
    boundary does both. Regions carrying no PAD evidence are read as prompt.
    A chunk that runs straight into a prompt leaves no PAD between them; the
    split is then placed so the prompt occupies a single block.

    Segments that needed zero padding leave no trace, so neighbouring
    segments can merge in the result; the recovered boundaries are always a
    subset of the true ones.

    Raises:
        AmbiguousPadding: If no canonical layout has this PAD pattern.
    """
    bs = block_size
    n = len(padded_tokens)
    if n == 0:
        return []
    chunk_starts: dict[int, int] = {}  # start -> end of its leading pad run
    prompt_ends: set[int] = set()
    for a, b in _pad_runs(padded_tokens):
        if b == n:
            raise AmbiguousPadding(f"trailing PAD run [{a}, {b}) is not followed by tokens")
        a_al, b_al = a % bs == 0, b % bs == 0
        if a_al and b_al:
            raise AmbiguousPadding(f"PAD run [{a}, {b}) fills whole blocks")
        if (a_al or b_al) and b - a >= bs:
            raise AmbiguousPadding(f"PAD run [{a}, {b}) is longer than one segment's padding")
        if a_al:
            chunk_starts[a] = b
        elif b_al:
            prompt_ends.add(b)
        else:
            m = (a // bs + 1) * bs
            if not a < m < b or b - m >= bs:
                raise AmbiguousPadding(f"PAD run [{a}, {b}) does not straddle exactly one boundary")
            prompt_ends.add(m)
            chunk_starts[m] = b
    cuts = sorted({0, n} | set(chunk_starts) | prompt_ends)
    out: list[tuple[SegmentKind, tuple[int, int]]] = []
    for x, y in zip(cuts, cuts[1:]):
        opens_chunk = x in chunk_starts
        closes_prompt = y in prompt_ends
        if not opens_chunk:
            out.append((SegmentKind.PROMPT, (x, y)))
        elif closes_prompt or (y == n and n % bs):
            # A chunk runs straight into a prompt; give the prompt one block.
            tail = y - bs if closes_prompt else n - n % bs
            if tail <= chunk_starts[x]:
                raise AmbiguousPadding(f"chunk at {x} has no tokens before the prompt at {tail}")
            out.append((SegmentKind.CHUNK, (x, tail)))
            out.append((SegmentKind.PROMPT, (tail, y)))
        else:
            out.append((SegmentKind.CHUNK, (x, y)))
    return out
