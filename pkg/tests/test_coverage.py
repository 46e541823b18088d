from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import bit_pairs_to_slots, map_to_bit_pairs, reference_fnv1a_64, reference_path_id
from ensfuzz.coverage import (
    CoverageMap,
    bucketize,
    fnv1a_64,
    is_new_coverage,
    merge,
    merge_in_place,
    path_id,
)

# ---------------------------------------------------------------------------
# bucketize
# ---------------------------------------------------------------------------

BUCKET_TABLE = [
    (1, 0), (2, 1), (3, 2), (4, 3), (5, 3), (7, 3), (8, 4), (15, 4),
    (16, 5), (31, 5), (32, 6), (127, 6), (128, 7), (200, 7), (1 << 20, 7),
]


@pytest.mark.parametrize("hits,expected", BUCKET_TABLE)
def test_bucketize_table(hits, expected):
    assert bucketize(hits) == expected


def test_bucketize_rejects_zero_hits():
    with pytest.raises(ValueError, match="no-hit"):
        bucketize(0)


@given(st.integers(min_value=1, max_value=1 << 20), st.integers(min_value=0, max_value=1 << 20))
def test_bucketize_monotone(a, delta):
    assert bucketize(a + delta) >= bucketize(a)


# ---------------------------------------------------------------------------
# path_id / fnv
# ---------------------------------------------------------------------------


def test_path_id_empty_trace_is_offset_basis():
    assert path_id([]) == 0xCBF29CE484222325


def test_path_id_deterministic():
    assert path_id([3, 1, 4, 1]) == path_id([3, 1, 4, 1])


def test_path_id_order_sensitive_against_reference():
    assert path_id([1, 2]) == reference_path_id([1, 2])
    assert path_id([2, 1]) == reference_path_id([2, 1])
    assert path_id([1, 2]) != path_id([2, 1])


@given(st.binary(max_size=64))
def test_fnv_matches_reference(data):
    assert fnv1a_64(data) == reference_fnv1a_64(data)


# ---------------------------------------------------------------------------
# merge / is_new_coverage
# ---------------------------------------------------------------------------

slot_dicts = st.dictionaries(
    st.integers(min_value=0, max_value=30),
    st.integers(min_value=1, max_value=255),
    max_size=10,
)
edge_maps = slot_dicts.map(lambda d: CoverageMap("edge", d))


def test_merge_into_empty_yields_all_bits():
    m = CoverageMap("edge", {1: 0b101, 7: 0b1})
    merged, new = merge(CoverageMap.empty("edge"), m)
    assert merged.slots == m.slots
    assert new == m.slots


def test_merge_idempotent_with_no_new_bits():
    m = CoverageMap("edge", {1: 0b101})
    merged, new = merge(m, m)
    assert merged.slots == m.slots
    assert new == {}


def test_merge_example_by_set_arithmetic():
    global_map = CoverageMap("edge", {1: 1 << 0})
    local = CoverageMap("edge", {1: 1 << 0, 2: 1 << 3})
    merged, new = merge(global_map, local)
    want_union = bit_pairs_to_slots(
        map_to_bit_pairs(global_map.slots) | map_to_bit_pairs(local.slots)
    )
    want_new = map_to_bit_pairs(local.slots) - map_to_bit_pairs(global_map.slots)
    assert merged.slots == want_union
    assert map_to_bit_pairs(new) == want_new == {(2, 3)}


def test_merge_rejects_kind_mismatch():
    with pytest.raises(ValueError, match="granularity mismatch"):
        merge(CoverageMap.empty("edge"), CoverageMap.empty("block"))
    with pytest.raises(ValueError, match="granularity mismatch"):
        is_new_coverage(CoverageMap.empty("block"), CoverageMap.empty("edge"))


def test_is_new_coverage_examples():
    m = CoverageMap("edge", {1: 1 << 0})
    assert is_new_coverage(CoverageMap.empty("edge"), m)
    assert not is_new_coverage(m, m)
    assert is_new_coverage(m, CoverageMap("edge", {1: 1 << 3}))


@given(edge_maps, edge_maps)
def test_merge_matches_set_model(a, b):
    merged, new = merge(a, b)
    assert map_to_bit_pairs(merged.slots) == map_to_bit_pairs(a.slots) | map_to_bit_pairs(b.slots)
    assert map_to_bit_pairs(new) == map_to_bit_pairs(b.slots) - map_to_bit_pairs(a.slots)


@given(edge_maps, edge_maps)
def test_merge_commutative(a, b):
    assert merge(a, b)[0].slots == merge(b, a)[0].slots


@given(edge_maps, edge_maps, edge_maps)
def test_merge_associative(a, b, c):
    left = merge(merge(a, b)[0], c)[0]
    right = merge(a, merge(b, c)[0])[0]
    assert left.slots == right.slots


@given(edge_maps)
def test_merge_idempotent(a):
    assert merge(a, a)[0].slots == a.slots


@given(edge_maps, edge_maps)
def test_is_new_coverage_consistent_with_merge(a, b):
    assert is_new_coverage(a, b) == (merge(a, b)[0].slots != a.slots)


@given(st.lists(edge_maps, max_size=6), st.randoms(use_true_random=False))
def test_merge_fold_is_permutation_invariant(maps, rnd):
    def fold(seq):
        acc = CoverageMap.empty("edge")
        for m in seq:
            acc = merge(acc, m)[0]
        return acc.slots

    shuffled = list(maps)
    rnd.shuffle(shuffled)
    assert fold(maps) == fold(shuffled)


@given(edge_maps, edge_maps)
def test_merge_in_place_agrees_with_merge(a, b):
    merged, new = merge(a, b)
    acc = a.copy()
    fresh = merge_in_place(acc, b)
    assert acc.slots == merged.slots
    assert fresh == new


def test_merge_never_clears_bits_random_walk():
    rng = random.Random(11)
    acc = CoverageMap.empty("edge")
    seen: set[tuple[int, int]] = set()
    for _ in range(200):
        m = CoverageMap(
            "edge", {rng.randrange(20): rng.randrange(1, 256) for _ in range(rng.randrange(4))}
        )
        acc = merge(acc, m)[0]
        pairs = map_to_bit_pairs(acc.slots)
        assert pairs >= seen
        seen = pairs


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_text_form_is_canonical():
    m = CoverageMap("edge", {0x20: 0x08, 0x1: 0x01})
    assert m.to_text() == "kind:edge\n00000001:01\n00000020:08\n"


def test_text_round_trip():
    m = CoverageMap("block", {5: 3, 1000: 255})
    again = CoverageMap.from_text(m.to_text())
    assert again.kind == m.kind
    assert again.slots == m.slots


def test_text_rejects_garbage():
    with pytest.raises(ValueError):
        CoverageMap.from_text("not a map")
    with pytest.raises(ValueError):
        CoverageMap.from_text("kind:edge\nzz:01\n")
