import pytest
from hypothesis import given
from hypothesis import strategies as st

from chunkkv.block_pool import (
    FREE,
    PRIVATE,
    BlockPool,
    OwnerKind,
    PoolConfig,
    chunk_owner,
    prefix_owner,
)
from chunkkv.errors import (
    BlockBusy,
    BlockIsFree,
    InsufficientBlocks,
    OwnershipConflict,
    RefcountUnderflow,
)


def make_pool(n=8, bs=16):
    return BlockPool(PoolConfig(n, bs))


def test_config_rejects_nonpositive():
    with pytest.raises(ValueError):
        PoolConfig(0)
    with pytest.raises(ValueError):
        PoolConfig(4, block_size=0)


def test_allocate_lowest_index_first():
    pool = make_pool()
    assert pool.allocate(3) == [0, 1, 2]
    pool.decref(1)
    pool.reclaim(1)
    assert pool.allocate(2) == [1, 3]


def test_allocate_sets_refcount_and_owner():
    pool = make_pool()
    (b,) = pool.allocate(1)
    assert pool.refcount(b) == 1
    assert pool.owner(b) == PRIVATE
    assert pool.stats().free == 7


def test_allocate_all_or_nothing():
    pool = make_pool(4)
    pool.allocate(3)
    with pytest.raises(InsufficientBlocks):
        pool.allocate(2)
    assert pool.num_free == 1


def test_allocate_zero_and_negative():
    pool = make_pool()
    assert pool.allocate(0) == []
    with pytest.raises(ValueError):
        pool.allocate(-1)
    with pytest.raises(ValueError):
        pool.allocate(1, owner=FREE)


def test_decref_to_zero_does_not_free():
    pool = make_pool()
    (b,) = pool.allocate(1)
    assert pool.decref(b) == 0
    assert pool.num_free == 7
    assert not pool.owner(b).is_free


def test_refcount_underflow():
    pool = make_pool()
    (b,) = pool.allocate(1)
    pool.decref(b)
    with pytest.raises(RefcountUnderflow):
        pool.decref(b)


def test_incref_free_block():
    pool = make_pool()
    with pytest.raises(BlockIsFree):
        pool.incref(0)


def test_reclaim_busy_and_free():
    pool = make_pool()
    (b,) = pool.allocate(1)
    with pytest.raises(BlockBusy):
        pool.reclaim(b)
    pool.decref(b)
    pool.reclaim(b)
    with pytest.raises(BlockIsFree):
        pool.reclaim(b)


def test_out_of_range_block():
    pool = make_pool(2)
    with pytest.raises(IndexError):
        pool.incref(5)


def test_claim_only_from_private():
    pool = make_pool()
    a, b = pool.allocate(2)
    pool.claim(a, prefix_owner(b"k"))
    assert pool.owner(a).key == b"k"
    with pytest.raises(OwnershipConflict):
        pool.claim(a, chunk_owner(b"c", 1))
    pool.claim(b, chunk_owner(b"c", 1))
    assert pool.owner(b).kind is OwnerKind.CHUNK
    with pytest.raises(OwnershipConflict):
        pool.claim(b, prefix_owner(b"x"))


def test_evictable_counter_tracks_chunk_refcounts():
    pool = make_pool()
    (b,) = pool.allocate(1)
    pool.claim(b, chunk_owner(b"c", 1))
    assert pool.stats().evictable == 0
    pool.decref(b)
    assert pool.stats().evictable == 1
    pool.incref(b)
    assert pool.stats().evictable == 0
    pool.decref(b)
    pool.reclaim(b)
    assert pool.stats() == pool.audit()
    assert pool.stats().evictable == 0


def test_stats_partition_capacity():
    pool = make_pool(10)
    a = pool.allocate(3)
    pool.claim(a[0], chunk_owner(b"c", 1))
    s = pool.stats()
    assert (s.free, s.prefix_owned, s.chunk_owned) == (7, 2, 1)
    assert s.capacity == 10 and s.used == 3


def test_clock_monotone():
    pool = make_pool()
    pool.advance(5)
    with pytest.raises(ValueError):
        pool.advance(4)
    (b,) = pool.allocate(1)
    assert pool.blocks[b].last_touch == 5


def test_set_tokens_bounds():
    pool = make_pool(bs=4)
    (b,) = pool.allocate(1)
    pool.set_tokens(b, [1, 2, 3, 4])
    with pytest.raises(ValueError):
        pool.set_tokens(b, [1] * 5)
    with pytest.raises(BlockIsFree):
        pool.set_tokens(3, [1])


def test_payload_factory_attaches_fresh_pages():
    pool = BlockPool(PoolConfig(2, 4), payload_factory=lambda: [0])
    a, b = pool.allocate(2)
    assert pool.blocks[a].payload == [0]
    assert pool.blocks[a].payload is not pool.blocks[b].payload


ops = st.lists(
    st.tuples(st.sampled_from(["alloc", "incref", "decref", "reclaim", "claim"]), st.integers(0, 15)),
    max_size=80,
)


@given(ops)
def test_random_ops_conserve_blocks(seq):
    """Every op either succeeds or raises without breaking conservation."""
    pool = make_pool(12)
    for op, x in seq:
        try:
            if op == "alloc":
                pool.allocate(x % 4)
            elif op == "incref":
                pool.incref(x % 12)
            elif op == "decref":
                pool.decref(x % 12)
            elif op == "reclaim":
                pool.reclaim(x % 12)
            else:
                pool.claim(x % 12, chunk_owner(bytes([x]), 1))
        except (InsufficientBlocks, BlockIsFree, RefcountUnderflow, BlockBusy, OwnershipConflict):
            pass
        stats = pool.audit()
        assert stats.free + stats.prefix_owned + stats.chunk_owned == 12
