import pytest
from hypothesis import given
from hypothesis import strategies as st

from chunkkv.block_pool import BlockPool, OwnerKind, PoolConfig, chunk_owner
from chunkkv.errors import OwnershipConflict
from chunkkv.prefix_cache import ROOT_KEY, PrefixCache, chain_key, chain_keys

BS = 4


def setup(n=32, retain=False):
    pool = BlockPool(PoolConfig(n, BS))
    return pool, PrefixCache(pool, retain=retain)


def insert(pool, cache, tokens):
    n_full = len(tokens) // BS
    blocks = pool.allocate(n_full)
    cache.insert_prefix(tokens, blocks)
    return blocks


def lcp_blocks(a, b):
    """Brute-force longest common block-granular prefix."""
    n = 0
    while (n + 1) * BS <= min(len(a), len(b)) and a[: (n + 1) * BS] == b[: (n + 1) * BS]:
        n += 1
    return n


def test_empty_index():
    pool, cache = setup()
    assert cache.match_prefix(list(range(1, 13)), BS) == (0, [])


def test_identical_request_full_hit():
    pool, cache = setup()
    toks = list(range(1, 13))
    blocks = insert(pool, cache, toks)
    assert cache.match_prefix(toks, BS) == (3, blocks)


def test_partial_sharing():
    pool, cache = setup()
    a = list(range(1, 13))
    blocks = insert(pool, cache, a)
    b = a[:8] + [99, 98, 97, 96]
    assert cache.match_prefix(b, BS) == (2, blocks[:2])
    c = a[:4] + [50] * 8
    assert cache.match_prefix(c, BS) == (1, blocks[:1])


def test_match_ignores_partial_block():
    pool, cache = setup()
    a = list(range(1, 11))
    blocks = insert(pool, cache, a)
    assert cache.match_prefix(a, BS) == (2, blocks)


def test_match_prefix_wrong_block_size():
    pool, cache = setup()
    with pytest.raises(ValueError):
        cache.match_prefix([1, 2], 8)


def test_insert_chunk_owned_block_conflict():
    pool, cache = setup()
    (b,) = pool.allocate(1)
    pool.claim(b, chunk_owner(b"c", 1))
    with pytest.raises(OwnershipConflict):
        cache.insert_block(chain_key(ROOT_KEY, [1, 2, 3, 4]), [1, 2, 3, 4], b)


def test_insert_partial_block_rejected():
    pool, cache = setup()
    (b,) = pool.allocate(1)
    with pytest.raises(ValueError):
        cache.insert_block(b"k", [1, 2], b)


def test_duplicate_key_keeps_block_private():
    pool, cache = setup()
    a, b = pool.allocate(2)
    key = chain_key(ROOT_KEY, [1, 2, 3, 4])
    assert cache.insert_block(key, [1, 2, 3, 4], a)
    assert not cache.insert_block(key, [1, 2, 3, 4], b)
    assert cache.lookup(key) == a
    assert pool.owner(b).key is None


def test_lookup_guards_content():
    pool, cache = setup()
    (a,) = pool.allocate(1)
    key = chain_key(ROOT_KEY, [1, 2, 3, 4])
    cache.insert_block(key, [1, 2, 3, 4], a)
    assert cache.lookup(key, [1, 2, 3, 4]) == a
    assert cache.lookup(key, [9, 9, 9, 9]) is None


def test_chunk_head_keys():
    pool, cache = setup()
    head = [0, 0, 7, 8]
    q1 = chain_key(ROOT_KEY, [1, 2, 3, 4])
    q2 = chain_key(ROOT_KEY, [5, 6, 7, 8])
    b1, b2 = pool.allocate(2)
    k1 = cache.register_chunk_head(q1, head, b1)
    k2 = cache.register_chunk_head(q2, head, b2)
    assert k1 != k2
    # the key only depends on the preceding content, not on where the block sits
    assert chain_keys([1, 2, 3, 4] + head, BS)[-1] == k1
    assert cache.lookup(k1) == b1 and cache.lookup(k2) == b2


def test_release_without_retain_frees():
    pool, cache = setup()
    toks = list(range(1, 9))
    blocks = insert(pool, cache, toks)
    free = pool.num_free
    for b in blocks:
        cache.release(b)
    assert pool.num_free == free + 2
    assert len(cache) == 0


def test_retain_mode_keeps_then_reclaims_oldest():
    pool, cache = setup(retain=True)
    a = insert(pool, cache, list(range(1, 5)))
    b = insert(pool, cache, list(range(11, 15)))
    pool.advance(1)
    cache.release(b[0])
    cache.release(a[0])
    assert cache.reclaimable() == 2
    assert cache.match_prefix(list(range(1, 5)), BS) == (1, a)
    assert cache.reclaim_idle(1) == 1
    assert cache.match_prefix(list(range(11, 15)), BS) == (0, [])
    assert cache.match_prefix(list(range(1, 5)), BS) == (1, a)
    cache.acquire(a[0])
    assert cache.reclaimable() == 0
    assert cache.reclaim_idle(5) == 0


def test_reclaim_idle_respects_exclude():
    pool, cache = setup(retain=True)
    a = insert(pool, cache, list(range(1, 5)))
    cache.release(a[0])
    assert cache.reclaimable(exclude={a[0]}) == 0
    assert cache.reclaim_idle(1, exclude={a[0]}) == 0


token_lists = st.lists(st.integers(1, 3), min_size=0, max_size=20)


@given(token_lists, token_lists)
def test_match_prefix_equals_lcp_oracle(a, b):
    pool, cache = setup(64)
    blocks = insert(pool, cache, a)
    n, hits = cache.match_prefix(b, BS)
    assert n == lcp_blocks(a, b)
    assert hits == blocks[:n]
    for i, blk in enumerate(hits):
        # chain soundness: stored content equals the request's tokens
        assert pool.blocks[blk].tokens == tuple(b[i * BS : (i + 1) * BS])
        assert pool.owner(blk).kind is OwnerKind.PREFIX
