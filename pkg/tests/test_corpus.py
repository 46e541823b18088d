from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import reference_fnv1a_64
from ensfuzz.corpus import (
    LOW_FREQ_PATH,
    RARE_BRANCH,
    ROUND_ROBIN,
    GlobalSeedPool,
    LocalQueue,
    Seed,
    SelectionContext,
    queue_select,
)


def seed_of(content: bytes, origin: str = "f1") -> Seed:
    return Seed.make(content, origin=origin, birth_tick=0, cause="new_coverage")


# ---------------------------------------------------------------------------
# Seed
# ---------------------------------------------------------------------------


def test_seed_id_is_content_hash():
    s = seed_of(b"hello")
    assert s.id == reference_fnv1a_64(b"hello")


def test_seed_rejects_oversize_content():
    with pytest.raises(ValueError, match="exceeds cap"):
        Seed.make(b"x" * 5000)
    Seed.make(b"x" * 5000, max_size=5000)  # configurable cap


def test_seed_rejects_unknown_cause():
    with pytest.raises(ValueError, match="cause"):
        Seed.make(b"x", cause="whatever")


# ---------------------------------------------------------------------------
# GlobalSeedPool
# ---------------------------------------------------------------------------


def test_pool_push_and_duplicate():
    pool = GlobalSeedPool()
    assert pool.push(seed_of(b"a"))
    assert not pool.is_synced(seed_of(b"a").id)
    assert not pool.push(seed_of(b"a"))  # same content, no-op
    assert len(pool) == 1


def test_pool_keeps_seeds_differing_in_one_byte():
    a, b = seed_of(b"seedA"), seed_of(b"seedB")
    assert reference_fnv1a_64(b"seedA") != reference_fnv1a_64(b"seedB")
    pool = GlobalSeedPool()
    assert pool.push(a) and pool.push(b)
    assert len(pool) == 2


def test_pool_unsynced_ordering_and_marking():
    pool = GlobalSeedPool()
    seeds = [seed_of(bytes([i])) for i in range(3)]
    for s in seeds:
        pool.push(s)
    assert pool.unsynced() == seeds
    pool.mark_synced(seeds[1].id)
    assert pool.unsynced() == [seeds[0], seeds[2]]
    assert pool.is_synced(seeds[1].id)


def test_pool_empty_unsynced():
    assert GlobalSeedPool().unsynced() == []


def test_pool_unknown_seed_errors():
    pool = GlobalSeedPool()
    with pytest.raises(KeyError, match="unknown seed"):
        pool.mark_synced(123)
    with pytest.raises(KeyError, match="unknown seed"):
        pool.get(123)


@given(st.lists(st.binary(max_size=8), max_size=30))
def test_pool_size_counts_distinct_contents(contents):
    pool = GlobalSeedPool()
    for c in contents:
        pool.push(seed_of(c))
    assert len(pool) == len({bytes(c) for c in contents})


@given(st.lists(st.binary(max_size=6), min_size=1, max_size=15, unique=True))
def test_pool_mark_synced_shrinks_unsynced(contents):
    pool = GlobalSeedPool()
    for c in contents:
        pool.push(seed_of(c))
    remaining = len(contents)
    for s in list(pool.seeds()):
        assert len(pool.unsynced()) == remaining
        pool.mark_synced(s.id)
        remaining -= 1
    assert pool.unsynced() == []


# ---------------------------------------------------------------------------
# LocalQueue
# ---------------------------------------------------------------------------


def test_queue_push_fifo_and_duplicate():
    q = LocalQueue("f1")
    a, b = seed_of(b"a"), seed_of(b"b")
    assert q.push(a) and q.push(b)
    assert not q.push(seed_of(b"a"))
    assert q.items == [a, b]
    assert a.id in q and seed_of(b"c").id not in q


# ---------------------------------------------------------------------------
# Selection policies
# ---------------------------------------------------------------------------


def test_round_robin_cycles_in_order():
    q = LocalQueue("f1")
    seeds = [seed_of(bytes([i])) for i in range(3)]
    for s in seeds:
        q.push(s)
    rng = random.Random(0)
    picks = [queue_select(q, ROUND_ROBIN, rng) for _ in range(7)]
    assert picks == [seeds[0], seeds[1], seeds[2], seeds[0], seeds[1], seeds[2], seeds[0]]


def test_round_robin_visits_all_before_revisit():
    q = LocalQueue("f1")
    seeds = [seed_of(bytes([i])) for i in range(5)]
    for s in seeds:
        q.push(s)
    rng = random.Random(0)
    picks = [queue_select(q, ROUND_ROBIN, rng) for _ in range(5)]
    assert sorted(p.id for p in picks) == sorted(s.id for s in seeds)


def test_empty_queue_errors():
    with pytest.raises(ValueError, match="queue empty"):
        queue_select(LocalQueue("f1"), ROUND_ROBIN, random.Random(0))


def test_rare_branch_prefers_rare_site():
    q = LocalQueue("f1")
    rare = seed_of(b"rare")
    hot_a, hot_b = seed_of(b"hotA"), seed_of(b"hotB")
    for s in (hot_a, hot_b, rare):
        q.push(s)
    ctx = SelectionContext(
        site_counts={1: 10, 2: 10, 3: 1},
        seed_sites={hot_a.id: frozenset({1}), hot_b.id: frozenset({2}), rare.id: frozenset({3})},
    )
    for _ in range(5):
        assert queue_select(q, RARE_BRANCH, random.Random(0), ctx) is rare


def test_rare_branch_tie_breaks_by_lowest_id():
    q = LocalQueue("f1")
    a, b = seed_of(b"one"), seed_of(b"two")
    q.push(a)
    q.push(b)
    ctx = SelectionContext(
        site_counts={7: 1},
        seed_sites={a.id: frozenset({7}), b.id: frozenset({7})},
    )
    expected = a if a.id < b.id else b
    assert queue_select(q, RARE_BRANCH, random.Random(0), ctx) is expected


def test_low_freq_path_prefers_rare_path():
    q = LocalQueue("f1")
    rare, hot = seed_of(b"rare-path"), seed_of(b"hot-path")
    q.push(rare)
    q.push(hot)
    ctx = SelectionContext(
        path_freqs={100: 1, 200: 99},
        seed_paths={rare.id: 100, hot.id: 200},
    )
    rng = random.Random(7)
    picks = [queue_select(q, LOW_FREQ_PATH, rng, ctx) for _ in range(100)]
    # Inverse-frequency weights give the rare path 1 / (1 + 1/99) > 99% mass.
    assert sum(1 for p in picks if p is rare) >= 90
