"""Tick-by-tick trace replay against the KV engine, with metrics and CSV output.

Each tick runs releases, then arrivals, then one scheduling attempt for
every queued request in arrival order, then records pool usage. A
rejected request stays queued and retries next tick until it has waited
``retry_limit`` ticks, after which it is dropped.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections import deque
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from chunkkv.block_pool import PoolConfig
from chunkkv.chunk_cache import RemoteStore
from chunkkv.errors import TraceFormatError
from chunkkv.scheduler import KvEngine, Policy, PolicyKind
from chunkkv.trace import Trace

DEFAULT_BLOCK_BYTES = 2 * 1024 * 1024


@dataclass(frozen=True)
class CostModel:
    prefill_ticks_per_token: float = 0.05
    remote_latency_ticks: int = 1
    remote_bandwidth_blocks_per_tick: float = 8.0
    block_bytes: int = DEFAULT_BLOCK_BYTES

    def __post_init__(self) -> None:
        if self.prefill_ticks_per_token < 0:
            raise ValueError("prefill_ticks_per_token must be non-negative")
        if self.remote_latency_ticks < 0:
            raise ValueError("remote_latency_ticks must be non-negative")
        if self.remote_bandwidth_blocks_per_tick <= 0:
            raise ValueError("remote_bandwidth_blocks_per_tick must be positive")
        if self.block_bytes < 0:
            raise ValueError("block_bytes must be non-negative")

    def prefill_ticks(self, tokens: int) -> int:
        return math.ceil(round(tokens * self.prefill_ticks_per_token, 9))


@dataclass(frozen=True)
class EngineOptions:
    remote_policy: str = "cost_based"
    retain_prefix: bool = False
    offload: bool = True
    retry_limit: int = 100

    def __post_init__(self) -> None:
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be non-negative")


@dataclass(frozen=True)
class RequestLatency:
    request_id: str
    arrival_tick: int
    admit_tick: int
    queue: int
    prefill: int
    fetch: int
    decode: int
    finish_tick: int
    recomputed_tokens: int


@dataclass(frozen=True)
class TickSample:
    tick: int
    blocks_used: int
    blocks_referenced: int
    chunk_blocks: int
    active_requests: int
    queued_requests: int


@dataclass
class MetricsReport:
    policy: str
    capacity_blocks: int
    block_bytes: int
    peak_blocks_used: int = 0
    mean_blocks_used: float = 0.0
    peak_blocks_referenced: int = 0
    chunk_hit_rate: float = 0.0
    prefix_hit_rate: float = 0.0
    total_recomputed_tokens: int = 0
    remote_fetch_blocks: int = 0
    rejections: int = 0
    dropped: int = 0
    completed: int = 0
    latencies: list[RequestLatency] = field(default_factory=list)
    series: list[TickSample] = field(default_factory=list)

    @property
    def mean_recomputed_tokens(self) -> float:
        return self.total_recomputed_tokens / self.completed if self.completed else 0.0

    @property
    def peak_gb(self) -> float:
        return self.peak_blocks_used * self.block_bytes / 1e9

    def _mean_latency(self, name: str) -> float:
        if not self.latencies:
            return 0.0
        return sum(getattr(x, name) for x in self.latencies) / len(self.latencies)

    def summary_row(self) -> dict[str, object]:
        return {
            "policy": self.policy,
            "peak_blocks_used": self.peak_blocks_used,
            "peak_blocks_referenced": self.peak_blocks_referenced,
            "mean_blocks_used": round(self.mean_blocks_used, 6),
            "peak_gb": round(self.peak_gb, 6),
            "chunk_hit_rate": round(self.chunk_hit_rate, 6),
            "prefix_hit_rate": round(self.prefix_hit_rate, 6),
            "total_recomputed_tokens": self.total_recomputed_tokens,
            "mean_recomputed_tokens": round(self.mean_recomputed_tokens, 6),
            "remote_fetch_blocks": self.remote_fetch_blocks,
            "rejections": self.rejections,
            "dropped": self.dropped,
            "completed": self.completed,
            "mean_queue_ticks": round(self._mean_latency("queue"), 6),
            "mean_prefill_ticks": round(self._mean_latency("prefill"), 6),
            "mean_fetch_ticks": round(self._mean_latency("fetch"), 6),
            "mean_decode_ticks": round(self._mean_latency("decode"), 6),
        }


SUMMARY_COLUMNS = tuple(MetricsReport("", 0, 0).summary_row())
SERIES_COLUMNS = tuple(TickSample.__dataclass_fields__)
LATENCY_COLUMNS = tuple(RequestLatency.__dataclass_fields__)


def _sample(engine: KvEngine, tick: int, active: int, queued: int) -> TickSample:
    stats = engine.pool.stats()
    used = stats.capacity - stats.free
    idle = engine.prefix.reclaimable()
    return TickSample(tick, used, used - stats.evictable - idle, stats.chunk_owned, active, queued)


def build_engine(
    pool_config: PoolConfig,
    cost: CostModel,
    options: EngineOptions,
    remote_dir: Path | None = None,
) -> KvEngine:
    remote = RemoteStore(
        bandwidth_blocks_per_tick=cost.remote_bandwidth_blocks_per_tick,
        latency_ticks=cost.remote_latency_ticks,
        directory=remote_dir,
    )
    return KvEngine(
        pool_config,
        remote=remote,
        offload=options.offload,
        retain_prefix=options.retain_prefix,
        remote_policy=options.remote_policy,
        prefill_ticks_per_token=cost.prefill_ticks_per_token,
    )


def replay(
    trace: Trace,
    policy: Policy,
    pool_config: PoolConfig,
    cost: CostModel | None = None,
    options: EngineOptions | None = None,
    engine: KvEngine | None = None,
    check_invariants: bool = False,
) -> MetricsReport:
    """Drive the scheduler over ``trace`` and collect metrics.

    Raises:
        TraceFormatError: If the trace block size differs from the pool's.
    """
    cost = cost or CostModel()
    options = options or EngineOptions()
    trace.validate()
    if trace.block_size != pool_config.block_size:
        raise TraceFormatError(
            f"trace block size {trace.block_size} != pool block size {pool_config.block_size}"
        )
    engine = engine or build_engine(pool_config, cost, options)
    report = MetricsReport(policy.name, pool_config.capacity_blocks, cost.block_bytes)
    pending = deque(trace.requests)
    queue: deque = deque()
    active: list = []  # (finish_tick, seq, plan)
    lookups = hits = eligible = chunk_hits = 0
    total_used = 0
    t = pending[0].arrival_tick if pending else 0
    seq = 0
    while pending or queue or active:
        while active and active[0][0] <= t:
            _, _, plan = heapq.heappop(active)
            engine.release_request(plan, t)
        while pending and pending[0].arrival_tick <= t:
            queue.append(pending.popleft())
        waiting: deque = deque()
        for tr in queue:
            outcome = engine.schedule(trace.to_request(tr), policy, t)
            if not outcome.admitted:
                report.rejections += 1
                if t - tr.arrival_tick >= options.retry_limit:
                    report.dropped += 1
                else:
                    waiting.append(tr)
                continue
            plan = outcome.plan
            c = plan.cost
            prefill = cost.prefill_ticks(c.recomputed_tokens)
            finish = t + max(1, c.fetch_ticks + prefill + tr.decode_hold)
            heapq.heappush(active, (finish, seq, plan))
            seq += 1
            report.completed += 1
            report.total_recomputed_tokens += c.recomputed_tokens
            report.remote_fetch_blocks += c.fetched_blocks
            lookups += c.prefix_lookups
            hits += c.prefix_hits
            eligible += c.chunk_eligible
            chunk_hits += c.chunk_hits
            report.latencies.append(
                RequestLatency(
                    tr.request_id, tr.arrival_tick, t, t - tr.arrival_tick,
                    prefill, c.fetch_ticks, tr.decode_hold, finish, c.recomputed_tokens,
                )
            )
        queue = waiting
        if check_invariants:
            engine.check_invariants()
        sample = _sample(engine, t, len(active), len(queue))
        # Nothing changes until the next arrival or release unless requests wait.
        if queue:
            nxt = t + 1
        else:
            nxt = min(
                pending[0].arrival_tick if pending else math.inf,
                active[0][0] if active else math.inf,
            )
            nxt = t + 1 if nxt == math.inf else int(nxt)
        for tick in range(t, nxt):
            report.series.append(sample if tick == t else replace(sample, tick=tick))
        total_used += sample.blocks_used * (nxt - t)
        report.peak_blocks_used = max(report.peak_blocks_used, sample.blocks_used)
        report.peak_blocks_referenced = max(report.peak_blocks_referenced, sample.blocks_referenced)
        t = nxt
    report.mean_blocks_used = total_used / len(report.series) if report.series else 0.0
    report.prefix_hit_rate = hits / lookups if lookups else 0.0
    report.chunk_hit_rate = chunk_hits / eligible if eligible else 0.0
    return report


def _fields(s: TickSample) -> tuple:
    return (s.tick, s.blocks_used, s.blocks_referenced, s.chunk_blocks, s.active_requests, s.queued_requests)


@dataclass
class Comparison:
    reports: list[MetricsReport]
    reference: str

    def ratio_rows(self) -> list[dict[str, object]]:
        """Baseline / reference ratios for the memory and recompute columns."""
        ref = next(r for r in self.reports if r.policy == self.reference)
        rows = []
        for r in self.reports:
            if r.policy == self.reference:
                continue
            row: dict[str, object] = {k: "" for k in SUMMARY_COLUMNS}
            row["policy"] = f"ratio:{r.policy}/{ref.policy}"
            for key in ("peak_blocks_used", "peak_blocks_referenced", "mean_blocks_used", "total_recomputed_tokens"):
                num, den = getattr(r, key), getattr(ref, key)
                row[key] = round(num / den, 6) if den else ("inf" if num else "")
            rows.append(row)
        return rows

    def peak_ratio(self, policy_name: str) -> float:
        by_name = {r.policy: r for r in self.reports}
        return by_name[policy_name].peak_blocks_used / by_name[self.reference].peak_blocks_used


def compare(
    trace: Trace,
    policies: Sequence[Policy],
    pool_config: PoolConfig,
    cost: CostModel | None = None,
    options: EngineOptions | None = None,
) -> Comparison:
    """Replay the same trace under every policy on isolated engines."""
    if len(policies) < 2:
        raise ValueError("compare needs at least two policies")
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate policies in {names}")
    reports = [replay(trace, p, pool_config, cost, options) for p in policies]
    canonical = [p.name for p in policies if p.kind is PolicyKind.CANONICAL]
    return Comparison(reports, canonical[0] if canonical else names[0])


def write_series_csv(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for s in report.series:
            w.writerow(_fields(s))


def write_latency_csv(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LATENCY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for x in report.latencies:
            w.writerow(asdict(x))


def write_summary_csv(rows: Sequence[dict[str, object]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
