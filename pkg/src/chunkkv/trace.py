"""Synthetic chunk-reuse traces and their line-delimited JSON file format.

A trace file starts with one header line carrying the format version, the
block size, and a chunk table mapping chunk names to token lists. Every
following line is one request whose segments either reference a chunk by
name or carry prompt tokens inline.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from chunkkv.errors import TraceFormatError
from chunkkv.scheduler import Request
from chunkkv.segmentation import Segment

TRACE_FORMAT = "chunkkv-trace"
TRACE_VERSION = 1
TICKS_PER_SECOND = 1000


@dataclass(frozen=True)
class WorkloadSpec:
    """Parameters of a synthetic trace.

    Lengths are drawn uniformly within ``±length_jitter`` of their mean;
    decode holds within ``±50%`` of ``mean_decode_ticks``.
    """

    n_requests: int = 300
    n_distinct_chunks: int = 16
    chunks_per_request: int = 4
    zipf_s: float = 1.0
    mean_chunk_tokens: int = 256
    mean_prompt_tokens: int = 32
    qps: float = 8.0
    seed: int = 0
    block_size: int = 16
    mean_decode_ticks: int = 2000
    length_jitter: float = 0.25
    vocab_size: int = 32000

    def __post_init__(self) -> None:
        for name in (
            "n_requests",
            "n_distinct_chunks",
            "chunks_per_request",
            "mean_chunk_tokens",
            "mean_prompt_tokens",
            "block_size",
            "vocab_size",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.chunks_per_request > self.n_distinct_chunks:
            raise ValueError("chunks_per_request cannot exceed n_distinct_chunks")
        if self.zipf_s < 0:
            raise ValueError(f"zipf_s must be >= 0, got {self.zipf_s}")
        if self.qps <= 0:
            raise ValueError(f"qps must be positive, got {self.qps}")
        if self.mean_decode_ticks < 0:
            raise ValueError("mean_decode_ticks must be non-negative")
        if not 0 <= self.length_jitter < 1:
            raise ValueError("length_jitter must be in [0, 1)")


@dataclass(frozen=True)
class PresetTarget:
    mean_tokens: int
    reuse_pct: float


# Calibrated so the generated traces land on the target mean request length
# and reuse fraction; chunks carry the reused share, questions the rest.
PRESETS: dict[str, WorkloadSpec] = {
    "emrqa-like": WorkloadSpec(
        n_distinct_chunks=12, chunks_per_request=4, mean_chunk_tokens=399, mean_prompt_tokens=36
    ),
    "newsqa-like": WorkloadSpec(
        n_distinct_chunks=12, chunks_per_request=2, mean_chunk_tokens=466, mean_prompt_tokens=586
    ),
    "squad-like": WorkloadSpec(
        n_distinct_chunks=16, chunks_per_request=4, mean_chunk_tokens=472, mean_prompt_tokens=336
    ),
    "narrativeqa-like": WorkloadSpec(
        n_distinct_chunks=12, chunks_per_request=3, mean_chunk_tokens=450, mean_prompt_tokens=86
    ),
}
PRESET_TARGETS: dict[str, PresetTarget] = {
    "emrqa-like": PresetTarget(1632, 98.2),
    "newsqa-like": PresetTarget(1518, 61.4),
    "squad-like": PresetTarget(2224, 84.9),
    "narrativeqa-like": PresetTarget(1435, 93.9),
}


def preset(name: str, **overrides) -> WorkloadSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; valid presets: {', '.join(sorted(PRESETS))}")
    return replace(PRESETS[name], **overrides)


@dataclass(frozen=True)
class TraceSegment:
    kind: str  # "chunk" or "prompt"
    ref: str | None = None
    tokens: tuple[int, ...] | None = None

    def to_json(self) -> dict:
        if self.kind == "chunk":
            return {"kind": "chunk", "ref": self.ref}
        return {"kind": "prompt", "tokens": list(self.tokens)}


@dataclass(frozen=True)
class TraceRequest:
    request_id: str
    arrival_tick: int
    segments: tuple[TraceSegment, ...]
    decode_hold: int = 0


@dataclass
class Trace:
    block_size: int
    chunk_table: dict[str, tuple[int, ...]]
    requests: list[TraceRequest]
    _chunks: dict[str, Segment] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.block_size <= 0:
            raise TraceFormatError(f"block_size must be positive, got {self.block_size}")
        for name, toks in self.chunk_table.items():
            if not toks or min(toks) < 1:
                raise TraceFormatError(f"chunk {name!r} must hold at least one token id >= 1")
        prev = 0
        seen: set[str] = set()
        for r in self.requests:
            if r.request_id in seen:
                raise TraceFormatError(f"duplicate request id {r.request_id!r}")
            seen.add(r.request_id)
            if r.arrival_tick < prev:
                raise TraceFormatError(f"request {r.request_id!r} arrives before its predecessor")
            prev = r.arrival_tick
            if r.decode_hold < 0:
                raise TraceFormatError(f"request {r.request_id!r} has a negative decode hold")
            if not r.segments:
                raise TraceFormatError(f"request {r.request_id!r} has no segments")
            for s in r.segments:
                if s.kind == "chunk":
                    if s.ref not in self.chunk_table:
                        raise TraceFormatError(f"request {r.request_id!r} references unknown chunk {s.ref!r}")
                elif s.kind == "prompt":
                    if not s.tokens or min(s.tokens) < 1:
                        raise TraceFormatError(f"request {r.request_id!r} has an empty or invalid prompt")
                else:
                    raise TraceFormatError(f"unknown segment kind {s.kind!r}")

    def chunk_segment(self, ref: str) -> Segment:
        seg = self._chunks.get(ref)
        if seg is None:
            seg = self._chunks[ref] = Segment.chunk(self.chunk_table[ref])
        return seg

    def to_request(self, r: TraceRequest) -> Request:
        segs = tuple(
            self.chunk_segment(s.ref) if s.kind == "chunk" else Segment.prompt(s.tokens)
            for s in r.segments
        )
        return Request(r.request_id, segs)

    def raw_tokens(self, r: TraceRequest) -> int:
        return sum(len(self.chunk_table[s.ref]) if s.kind == "chunk" else len(s.tokens) for s in r.segments)


def _jittered(rng: np.random.Generator, mean: int, jitter: float, n: int) -> np.ndarray:
    lo, hi = mean * (1 - jitter), mean * (1 + jitter)
    return np.maximum(1, np.rint(rng.uniform(lo, hi, size=n))).astype(int)


def zipf_weights(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    return w / w.sum()


def generate(spec: WorkloadSpec) -> Trace:
    """Deterministic trace for ``spec``; chunk popularity follows Zipf(s)."""
    rng = np.random.default_rng(spec.seed)
    chunk_lens = _jittered(rng, spec.mean_chunk_tokens, spec.length_jitter, spec.n_distinct_chunks)
    names = [f"c{i:04d}" for i in range(spec.n_distinct_chunks)]
    table = {
        name: tuple(int(t) for t in rng.integers(1, spec.vocab_size, size=n))
        for name, n in zip(names, chunk_lens)
    }
    weights = zipf_weights(spec.n_distinct_chunks, spec.zipf_s)
    gaps = rng.exponential(TICKS_PER_SECOND / spec.qps, size=spec.n_requests)
    arrivals = np.floor(np.cumsum(gaps) - gaps[0]).astype(int)
    prompt_lens = _jittered(rng, spec.mean_prompt_tokens, spec.length_jitter, spec.n_requests)
    holds = np.rint(rng.uniform(0.5, 1.5, size=spec.n_requests) * spec.mean_decode_ticks).astype(int)
    width = len(str(spec.n_requests - 1))
    requests = []
    for i in range(spec.n_requests):
        picks = rng.choice(spec.n_distinct_chunks, size=spec.chunks_per_request, replace=False, p=weights)
        question = tuple(int(t) for t in rng.integers(1, spec.vocab_size, size=prompt_lens[i]))
        segs = tuple(TraceSegment("chunk", ref=names[j]) for j in picks)
        segs += (TraceSegment("prompt", tokens=question),)
        requests.append(TraceRequest(f"r{i:0{width}d}", int(arrivals[i]), segs, int(holds[i])))
    return Trace(spec.block_size, table, requests)


def measure_reuse(trace: Trace) -> float:
    """Mean per-request share of raw tokens belonging to already-seen chunks."""
    if not trace.requests:
        return 0.0
    seen: set[str] = set()
    fractions = []
    for r in trace.requests:
        reused = 0
        for s in r.segments:
            if s.kind == "chunk":
                if s.ref in seen:
                    reused += len(trace.chunk_table[s.ref])
                seen.add(s.ref)
        fractions.append(reused / trace.raw_tokens(r))
    return float(np.mean(fractions))


def mean_request_tokens(trace: Trace) -> float:
    return float(np.mean([trace.raw_tokens(r) for r in trace.requests])) if trace.requests else 0.0


# -- file format ------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def iter_trace_lines(trace: Trace) -> Iterator[str]:
    yield _dumps(
        {
            "format": TRACE_FORMAT,
            "version": TRACE_VERSION,
            "block_size": trace.block_size,
            "chunk_table": {k: list(v) for k, v in trace.chunk_table.items()},
        }
    )
    for r in trace.requests:
        yield _dumps(
            {
                "id": r.request_id,
                "arrival_tick": r.arrival_tick,
                "segments": [s.to_json() for s in r.segments],
                "decode_hold": r.decode_hold,
            }
        )


def write_trace(trace: Trace, path: str | Path) -> None:
    Path(path).write_text("".join(line + "\n" for line in iter_trace_lines(trace)))


def _int_list(value, what: str) -> tuple[int, ...]:
    if not isinstance(value, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in value):
        raise TraceFormatError(f"{what} must be a list of integers")
    return tuple(value)


def _parse_segment(obj, rid: str) -> TraceSegment:
    if not isinstance(obj, dict):
        raise TraceFormatError(f"request {rid!r}: segment must be an object")
    kind = obj.get("kind")
    if kind == "chunk":
        ref = obj.get("ref")
        if not isinstance(ref, str):
            raise TraceFormatError(f"request {rid!r}: chunk segment needs a string ref")
        return TraceSegment("chunk", ref=ref)
    if kind == "prompt":
        return TraceSegment("prompt", tokens=_int_list(obj.get("tokens"), f"request {rid!r} prompt"))
    raise TraceFormatError(f"request {rid!r}: unknown segment kind {kind!r}")


def parse_trace(lines: Iterable[str]) -> Trace:
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rows.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not rows:
        raise TraceFormatError("empty trace")
    _, header = rows[0]
    if not isinstance(header, dict) or header.get("format") != TRACE_FORMAT:
        raise TraceFormatError("first line is not a trace header")
    if header.get("version") != TRACE_VERSION:
        raise TraceFormatError(f"unsupported trace version {header.get('version')!r}")
    bs = header.get("block_size")
    if not isinstance(bs, int) or isinstance(bs, bool):
        raise TraceFormatError("header block_size must be an integer")
    raw_table = header.get("chunk_table")
    if not isinstance(raw_table, dict):
        raise TraceFormatError("header chunk_table must be an object")
    table = {str(k): _int_list(v, f"chunk {k!r}") for k, v in raw_table.items()}
    requests = []
    for lineno, obj in rows[1:]:
        if not isinstance(obj, dict):
            raise TraceFormatError(f"line {lineno}: record must be an object")
        try:
            rid, arrival, segs = obj["id"], obj["arrival_tick"], obj["segments"]
        except KeyError as exc:
            raise TraceFormatError(f"line {lineno}: missing field {exc.args[0]!r}") from exc
        hold = obj.get("decode_hold", 0)
        if not isinstance(rid, str) or not isinstance(arrival, int) or not isinstance(hold, int):
            raise TraceFormatError(f"line {lineno}: bad id, arrival_tick, or decode_hold type")
        if not isinstance(segs, list):
            raise TraceFormatError(f"line {lineno}: segments must be a list")
        requests.append(TraceRequest(rid, arrival, tuple(_parse_segment(s, rid) for s in segs), hold))
    return Trace(bs, table, requests)


def read_trace(path: str | Path) -> Trace:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise TraceFormatError(f"cannot read trace {path}: {exc.strerror}") from exc
    return parse_trace(text.splitlines())
