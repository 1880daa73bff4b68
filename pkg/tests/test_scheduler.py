import math

import pytest

from _util import chunk, engine, prompt, req
from chunkkv.block_pool import OwnerKind
from chunkkv.chunk_cache import Residency
from chunkkv.errors import DoubleRelease
from chunkkv.scheduler import (
    BlockSlot,
    ChunkResidency,
    ChunkStatus,
    DecisionKind,
    Policy,
    PolicyKind,
    Sharing,
    SlotAction,
    SlotRole,
    estimate_demand,
    merge_spans,
    policy_recompute_spans,
    sharing_semantics,
)
from chunkkv.segmentation import PAD, canonicalize

CANON = Policy.canonical()
BASELINES = [Policy.naive(), Policy.full_recompute(), Policy.cacheblend(), Policy.epic()]


def test_policy_validation_and_names():
    with pytest.raises(ValueError):
        Policy.cacheblend(1.5)
    with pytest.raises(ValueError):
        Policy.epic(-1)
    assert Policy.epic(32).name == "epic(32)"
    assert Policy.cacheblend(0.15).name == "cacheblend(0.15)"
    assert CANON.name == "canonical"


def test_sharing_semantics():
    assert sharing_semantics(CANON) is Sharing.SHARED_CANONICAL
    for p in BASELINES:
        assert sharing_semantics(p) is Sharing.PRIVATE_PER_REQUEST


def test_first_request_example():
    e = engine()
    out = e.schedule(req("a", chunk(20), prompt(10)), CANON, 0)
    plan = out.plan
    assert out.admitted
    assert plan.cost.new_blocks == 3
    assert plan.cost.recomputed_tokens == 30
    assert plan.decisions[0].kind is DecisionKind.CHUNK_NEW
    head, body = plan.block_table[0], plan.block_table[1]
    assert e.pool.owner(head).kind is OwnerKind.PREFIX and e.pool.owner(head).key is not None
    assert e.pool.owner(body).kind is OwnerKind.CHUNK and e.pool.owner(body).ordinal == 1
    assert e.chunks.entries[plan.decisions[0].chunk_id].size_blocks == 1
    e.check_invariants()


def test_identical_chunk_request_reuses_everything():
    e = engine()
    first = e.schedule(req("a", chunk(20)), CANON, 0).plan
    second = e.schedule(req("b", chunk(20)), CANON, 1).plan
    assert second.cost.recomputed_tokens == 0
    assert second.cost.new_blocks == 0
    assert second.block_table == first.block_table
    assert second.decisions[0].kind is DecisionKind.CHUNK_SHARED and second.decisions[0].head_hit


def test_identical_request_with_question_recomputes_only_partial_block():
    e = engine()
    e.schedule(req("a", chunk(20), prompt(10)), CANON, 0)
    second = e.schedule(req("b", chunk(20), prompt(10)), CANON, 1).plan
    # the 10-token question is a partial block and is never prefix-indexed
    assert second.cost.recomputed_tokens == 10
    assert second.cost.new_blocks == 1
    assert second.decisions[0].kind is DecisionKind.CHUNK_SHARED


def test_different_question_prefix_recomputes_head_only():
    e = engine()
    c = chunk(20)
    a = e.schedule(req("a", prompt(5, 1), c, prompt(3, 500)), CANON, 0).plan
    b = e.schedule(req("b", prompt(5, 100), c, prompt(3, 500)), CANON, 1).plan
    d = b.decisions[1]
    assert d.kind is DecisionKind.CHUNK_SHARED and not d.head_hit
    assert b.block_table[2] == a.block_table[2]  # canonical block shared
    assert b.block_table[1] != a.block_table[1]  # head block is per context
    # head block span [16, 32) holds 12 PADs and 4 real tokens
    assert (16, 32) in merge_spans(b.recompute_spans) or any(
        x <= 16 and y >= 32 for x, y in b.recompute_spans
    )
    assert b.cost.recomputed_slots - b.cost.recomputed_tokens == 12
    assert b.cost.recomputed_tokens == 5 + 4 + 3


def test_estimate_demand_examples():
    def slots(*actions):
        return [BlockSlot(a, SlotRole.PRIVATE) for a in actions]

    assert estimate_demand(slots(SlotAction.SHARED, SlotAction.HIT)) == 0
    assert estimate_demand(slots(*[SlotAction.NEW] * 4)) == 4
    # shared chunk whose head missed the prefix chain, plus 2 prompt blocks
    assert estimate_demand(slots(SlotAction.NEW, SlotAction.SHARED, SlotAction.SHARED, SlotAction.NEW, SlotAction.NEW)) == 3


def test_plan_demand_matches_allocations():
    e = engine()
    e.schedule(req("a", chunk(40)), CANON, 0)
    draft = e.plan(req("b", prompt(7, 300), chunk(40), prompt(20, 900)), CANON)
    free = e.pool.num_free
    plan = e.schedule(req("b", prompt(7, 300), chunk(40), prompt(20, 900)), CANON, 1).plan
    assert draft.demand == free - e.pool.num_free == plan.cost.new_blocks == 1 + 1 + 2


def test_release_twice():
    e = engine()
    plan = e.schedule(req("a", chunk(20), prompt(10)), CANON, 0).plan
    e.release_request(plan, 1)
    with pytest.raises(DoubleRelease):
        e.release_request(plan, 2)


def test_release_restores_free_count_except_chunk_blocks():
    e = engine()
    free0 = e.pool.num_free
    plan = e.schedule(req("a", prompt(16, 1), chunk(50), prompt(10, 500)), CANON, 0).plan
    e.release_request(plan, 1)
    k = math.ceil(50 / 16) - 1
    assert e.pool.num_free == free0 - k
    assert e.pool.stats().evictable == k
    assert e.chunks.entries[plan.decisions[1].chunk_id].evictable
    e.check_invariants()


def test_readmit_after_release_recomputes_head_only():
    e = engine()
    plan = e.schedule(req("a", chunk(20)), CANON, 0).plan
    e.release_request(plan, 1)
    again = e.schedule(req("b", chunk(20)), CANON, 2).plan
    assert again.cost.recomputed_slots == 16
    assert again.cost.recomputed_tokens == 4
    assert again.recompute_spans == [(0, 16)]


def test_policy_recompute_spans_examples():
    layout = canonicalize([chunk(100)], 16)
    t0 = layout.spans[0].token_span[0]  # 12 leading pads
    cached = [ChunkResidency(ChunkStatus.CACHED, chunk_id=b"x" * 16)]
    assert policy_recompute_spans(Policy.epic(16), layout, cached) == [(t0, t0 + 16)]
    blend = policy_recompute_spans(Policy.cacheblend(0.15), layout, cached)
    assert sum(b - a for a, b in blend) == 15
    assert all(t0 <= a < b <= t0 + 100 for a, b in blend)
    assert policy_recompute_spans(CANON, layout, cached) == [(0, 16)]
    assert policy_recompute_spans(Policy.naive(), layout, cached) == []
    assert policy_recompute_spans(Policy.full_recompute(), layout, cached) == [(t0, t0 + 100)]
    new = [ChunkResidency(ChunkStatus.NEW, chunk_id=b"x" * 16)]
    assert policy_recompute_spans(Policy.naive(), layout, new) == [(t0, t0 + 100)]
    with pytest.raises(ValueError):
        policy_recompute_spans(CANON, layout, [])


def test_cacheblend_count_and_determinism():
    layout = canonicalize([chunk(123)], 16)
    res = [ChunkResidency(ChunkStatus.CACHED, chunk_id=b"y" * 16)]
    a = policy_recompute_spans(Policy.cacheblend(0.15, seed=3), layout, res)
    b = policy_recompute_spans(Policy.cacheblend(0.15, seed=3), layout, res)
    assert a == b
    assert sum(y - x for x, y in a) == math.ceil(0.15 * 123)


@pytest.mark.parametrize("policy", BASELINES + [CANON])
def test_single_request_blocks(policy):
    e = engine()
    plan = e.schedule(req("a", prompt(33), chunk(70), prompt(9, 700)), policy, 0).plan
    assert plan.n_blocks == 3 + 5 + 1
    assert e.pool.stats().used == 9


def _concurrent_census(policy, n=8):
    e = engine(capacity=512)
    c = chunk(80)  # 5 blocks: head + 4 canonical
    warm = e.schedule(req("warm", prompt(16, 9000), c), policy, 0).plan
    e.release_request(warm, 1)
    plans = [
        e.schedule(req(f"r{i}", prompt(16, 100 * i + 1), c, prompt(4, 50)), policy, 2).plan
        for i in range(n)
    ]
    return e, plans


def test_eight_requests_canonical_dedup():
    e, plans = _concurrent_census(CANON)
    chunk_blocks = {b for p in plans for bs in p.chunk_blocks().values() for b in bs}
    heads = {p.decisions[1].head_block for p in plans}
    assert len(chunk_blocks) == 4
    assert len(heads) == 8
    assert e.pool.stats().chunk_owned == 4
    e.check_invariants()


@pytest.mark.parametrize("policy", [Policy.epic(), Policy.cacheblend(), Policy.naive()])
def test_eight_requests_baselines_duplicate(policy):
    e, plans = _concurrent_census(policy)
    chunk_blocks = [b for p in plans for bs in p.chunk_blocks().values() for b in bs]
    assert len(chunk_blocks) == len(set(chunk_blocks)) == 32
    if policy.kind is PolicyKind.NAIVE:
        assert all(p.cost.recomputed_tokens == 16 + 4 for p in plans)  # question tokens only


def test_rejection_is_atomic():
    e = engine(capacity=6)
    e.schedule(req("a", chunk(40)), CANON, 0)
    snap = e.snapshot()
    out = e.schedule(req("b", prompt(100)), CANON, 5)
    assert not out.admitted
    assert out.demand == 7 and out.available == 6 - 3
    assert e.snapshot() == snap


def test_reject_only_when_forced_evicts_otherwise():
    e = engine(capacity=6)
    plan = e.schedule(req("a", chunk(40)), CANON, 0).plan
    e.release_request(plan, 1)
    # 3 free + 2 evictable chunk blocks covers a 5-block prompt
    out = e.schedule(req("b", prompt(80)), CANON, 2)
    assert out.admitted
    assert e.chunks.eviction_log == [plan.decisions[0].chunk_id]
    assert e.chunks.residency(plan.decisions[0].chunk_id) is Residency.REMOTE_ONLY


def test_admission_does_not_count_reused_chunk_as_evictable():
    e = engine(capacity=6)
    c = chunk(40)
    plan = e.schedule(req("a", c), CANON, 0).plan
    e.release_request(plan, 1)
    # reusing c pins its 2 blocks; the head (1) plus a 4-block prompt needs 5 > 4 free
    out = e.schedule(req("b", prompt(3, 77), c, prompt(64, 200)), CANON, 2)
    assert not out.admitted


def test_determinism_across_engines():
    seq = [req(f"r{i}", prompt(3 + i, i * 10 + 1), chunk(20 + 7 * (i % 3)), prompt(5, 400)) for i in range(6)]
    tables = []
    for _ in range(2):
        e = engine(capacity=20)
        out = []
        for t, r in enumerate(seq):
            o = e.schedule(r, CANON, t)
            out.append(o.plan.block_table if o.admitted else ("rej", o.demand))
        tables.append((out, e.snapshot()))
    assert tables[0] == tables[1]


@pytest.mark.parametrize(
    "remote_policy, expected",
    [("always_fetch", DecisionKind.CHUNK_FETCHED), ("always_recompute", DecisionKind.CHUNK_NEW)],
)
def test_remote_policy_knob(remote_policy, expected):
    e = engine(capacity=8, remote_policy=remote_policy)
    c = chunk(60)
    plan = e.schedule(req("a", c), CANON, 0).plan
    e.release_request(plan, 1)
    filler = e.schedule(req("filler", prompt(100)), CANON, 2).plan  # forces eviction of c
    assert e.chunks.residency(plan.decisions[0].chunk_id) is Residency.REMOTE_ONLY
    e.release_request(filler, 3)
    again = e.schedule(req("b", c), CANON, 4).plan
    assert again.decisions[0].kind is expected
    assert again.cost.fetched_blocks == (3 if expected is DecisionKind.CHUNK_FETCHED else 0)


def test_cost_based_fetch_vs_recompute():
    def run(tpt):
        e = engine(capacity=16, prefill_ticks_per_token=tpt)
        c = chunk(200)  # 13 blocks: head + 12 canonical
        plan = e.schedule(req("a", c), CANON, 0).plan
        e.release_request(plan, 1)
        filler = e.schedule(req("f", prompt(100)), CANON, 2).plan
        e.release_request(filler, 3)
        return e.schedule(req("b", c), CANON, 4).plan

    cheap_compute = run(0.0)
    assert cheap_compute.decisions[0].kind is DecisionKind.CHUNK_NEW
    slow_compute = run(1.0)
    d = slow_compute.decisions[0]
    assert d.kind is DecisionKind.CHUNK_FETCHED
    assert d.fetch_cost == 1 + math.ceil(12 / 8)
    assert slow_compute.cost.fetched_blocks == 12
    assert slow_compute.cost.recomputed_tokens == 200 - 192


def test_chunk_repeated_within_request_shares_blocks():
    e = engine()
    c = chunk(40)
    plan = e.schedule(req("a", c, prompt(5, 300), c), CANON, 0).plan
    kinds = [d.kind for d in plan.decisions]
    assert kinds[0] is DecisionKind.CHUNK_NEW and kinds[2] is DecisionKind.CHUNK_SHARED
    assert plan.decisions[0].blocks[1:] == plan.decisions[2].blocks[1:]
    assert e.chunks.entries[plan.decisions[0].chunk_id].refcount == 2
    e.release_request(plan, 1)
    assert e.chunks.entries[plan.decisions[0].chunk_id].refcount == 0
    e.check_invariants()


def test_single_block_chunk_goes_through_prefix_path():
    e = engine()
    a = e.schedule(req("a", chunk(10)), CANON, 0).plan
    b = e.schedule(req("b", chunk(10)), CANON, 1).plan
    assert not e.chunks.entries
    assert b.block_table == a.block_table and b.cost.recomputed_tokens == 0


def test_block_map_total_and_injective():
    e = engine()
    plan = e.schedule(req("a", prompt(21), chunk(37), prompt(30, 400)), CANON, 0).plan
    seen = set()
    for i in range(len(plan.layout)):
        b, slot = plan.block_map(i)
        assert (b, slot) not in seen
        seen.add((b, slot))
    with pytest.raises(IndexError):
        plan.block_map(len(plan.layout))


def test_baseline_prefix_reuse_before_first_chunk():
    e = engine()
    p = Policy.epic()
    e.schedule(req("a", prompt(40), chunk(30)), p, 0)
    b = e.schedule(req("b", prompt(40), chunk(30)), p, 1).plan
    # 40 tokens pad to three whole blocks, so all three are indexable
    assert b.cost.prefix_hits == 3


def test_clock_must_not_go_backwards():
    e = engine()
    e.schedule(req("a", chunk(20)), CANON, 5)
    with pytest.raises(ValueError):
        e.schedule(req("b", chunk(20)), CANON, 4)


def test_recomputed_counts_skip_pads():
    e = engine()
    plan = e.schedule(req("a", prompt(5), chunk(20)), Policy.full_recompute(), 0).plan
    pad_slots = sum(1 for t in plan.layout.padded_tokens if t == PAD)
    assert plan.cost.recomputed_tokens == 25
    assert pad_slots == 11 + 12
