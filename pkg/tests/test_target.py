from __future__ import annotations

import random

import pytest

from conftest import reference_path_id
from ensfuzz.coverage import path_id
from ensfuzz.target import (
    BytesEq,
    Edge,
    LengthGe,
    Leaf,
    Node,
    TargetSpec,
    builtin_motivating,
    enumerate_target,
    execute,
    format_target_spec,
    parse_target_spec,
    random_target,
    two_string_input,
)
from ensfuzz.triage import Backtrace, Frame


def leaf_target(nodes: dict[str, Node], leaves: list[str], entry: str,
                crash: dict[str, Backtrace] | None = None, max_len: int = 64) -> TargetSpec:
    crash = crash or {}
    return TargetSpec(
        "test",
        nodes,
        {lid: Leaf(lid, crash.get(lid)) for lid in leaves},
        entry,
        max_input_len=max_len,
    )


# ---------------------------------------------------------------------------
# execute on the built-in target
# ---------------------------------------------------------------------------


def test_magic_str_alone_reaches_t1_then_t3():
    result = execute(builtin_motivating(), two_string_input(b"Magic Str", b"xxxx"))
    assert result.trace == (1, 3)
    assert result.leaf == "T3"
    assert not result.crashed and result.backtrace is None


def test_both_magics_crash_at_t4():
    result = execute(builtin_motivating(), two_string_input(b"Magic Str", b"Magic Num"))
    assert result.trace == (1, 4)
    assert result.leaf == "T4"
    assert result.crashed and result.backtrace is not None


def test_swapped_magics_crash_at_t5():
    result = execute(builtin_motivating(), two_string_input(b"Magic Num", b"Magic Str"))
    assert result.trace == (2, 5)
    assert result.leaf == "T5"
    assert result.crashed


def test_empty_input_falls_through_without_instrumentation():
    result = execute(builtin_motivating(), b"")
    assert result.trace == ()
    assert result.leaf == "miss"
    assert not result.crashed
    assert result.path == 0xCBF29CE484222325  # the empty-trace path id
    assert result.edge_cover.is_empty()
    assert not result.block_cover.is_empty()  # blocks are walked regardless


def test_execute_is_deterministic():
    target = builtin_motivating()
    data = two_string_input(b"Magic Num", b"whatever")
    first, second = execute(target, data), execute(target, data)
    assert first == second


def test_execute_rejects_oversize_input():
    with pytest.raises(ValueError, match="exceeds target max"):
        execute(builtin_motivating(), b"x" * 65)


def test_coverage_maps_reflect_trace_and_blocks():
    result = execute(builtin_motivating(), two_string_input(b"Magic Str", b"x"))
    assert result.edge_cover.sites() == {1, 3}
    assert len(result.block_cover.sites()) == 3  # str node, second check, leaf


# ---------------------------------------------------------------------------
# the oracle
# ---------------------------------------------------------------------------


def test_motivating_oracle_matches_hand_enumeration():
    oracle = enumerate_target(builtin_motivating())
    hand_traces = [(1, 3), (1, 4), (2, 5), (2, 6)]
    assert oracle.paths == frozenset(reference_path_id(t) for t in hand_traces)
    assert oracle.branch_sites == frozenset({1, 2, 3, 4, 5, 6})
    assert oracle.crash_leaves == frozenset({"T4", "T5"})


def test_motivating_witnesses_reproduce_their_paths():
    target = builtin_motivating()
    oracle = enumerate_target(target)
    for pid, witness in oracle.witnesses.items():
        assert execute(target, witness).path == pid
    assert execute(target, oracle.boring_witness).trace == ()


def test_single_node_target_has_two_paths():
    nodes = {
        "n": Node("n", BytesEq(0, b"A"), Edge(1, "yes"), Edge(2, "no")),
    }
    oracle = enumerate_target(leaf_target(nodes, ["yes", "no"], "n"))
    assert len(oracle.paths) == 2
    assert oracle.branch_sites == frozenset({1, 2})


def test_three_node_chain_with_false_exits_has_four_paths():
    # Independent predicates; true edges chain, false edges exit.
    nodes = {
        "a": Node("a", BytesEq(0, b"A"), Edge(1, "b"), Edge(2, "exit_a")),
        "b": Node("b", BytesEq(4, b"B"), Edge(3, "c"), Edge(4, "exit_b")),
        "c": Node("c", BytesEq(8, b"C"), Edge(5, "end_true"), Edge(6, "end_false")),
    }
    target = leaf_target(nodes, ["exit_a", "exit_b", "end_true", "end_false"], "a")
    oracle = enumerate_target(target)
    hand_traces = [(2,), (1, 4), (1, 3, 6), (1, 3, 5)]
    assert oracle.paths == frozenset(reference_path_id(t) for t in hand_traces)


def test_oracle_prunes_contradictory_branches():
    # Both nodes test the same bytes: the true/false combination is infeasible.
    nodes = {
        "a": Node("a", BytesEq(0, b"AB"), Edge(1, "b"), Edge(2, "out")),
        "b": Node("b", BytesEq(0, b"AB"), Edge(3, "both"), Edge(4, "impossible")),
    }
    target = leaf_target(nodes, ["out", "both", "impossible"], "a")
    oracle = enumerate_target(target)
    assert oracle.paths == frozenset(reference_path_id(t) for t in [(2,), (1, 3)])


def test_oracle_handles_length_constraints():
    # length_ge(5) false forbids inputs of length >= 5, so the true branch of
    # the 8-byte magic can never follow the short branch.
    nodes = {
        "len": Node("len", LengthGe(5), Edge(1, "magic"), Edge(2, "short")),
        "magic": Node("magic", BytesEq(0, b"ABCDEFGH"), Edge(3, "deep"), Edge(4, "shallow")),
    }
    target = leaf_target(nodes, ["short", "deep", "shallow"], "len")
    oracle = enumerate_target(target)
    assert oracle.paths == frozenset(
        reference_path_id(t) for t in [(2,), (1, 3), (1, 4)]
    )


def test_oracle_crash_leaf_inventory():
    bt = Backtrace((Frame("boom", "toy.c", 1),))
    nodes = {"n": Node("n", BytesEq(0, b"X"), Edge(1, "bad"), Edge(2, "ok"))}
    target = leaf_target(nodes, ["bad", "ok"], "n", crash={"bad": bt})
    assert enumerate_target(target).crash_leaves == frozenset({"bad"})


def test_oracle_rejects_walk_blowup():
    # 21 nodes whose both edges advance to the next node: 2^21 walks.
    nodes = {}
    for i in range(21):
        dest = f"n{i + 1}" if i < 20 else "end"
        nodes[f"n{i}"] = Node(f"n{i}", LengthGe(0), Edge(2 * i + 1, dest), Edge(2 * i + 2, dest))
    target = leaf_target(nodes, ["end"], "n0")
    with pytest.raises(ValueError, match="too large for oracle"):
        enumerate_target(target)


def test_every_executed_path_is_in_the_oracle():
    rng = random.Random(1234)
    for _ in range(25):
        target = random_target(rng, node_count=rng.randint(1, 8))
        oracle = enumerate_target(target)
        for _ in range(150):
            data = bytes(rng.randrange(256) for _ in range(rng.randrange(target.max_input_len)))
            result = execute(target, data)
            assert result.path in oracle.paths
            if result.crashed:
                assert result.leaf in oracle.crash_leaves


def test_exhaustive_driver_agrees_with_oracle_on_random_targets():
    rng = random.Random(99)
    for _ in range(15):
        target = random_target(rng, node_count=rng.randint(1, 8))
        oracle = enumerate_target(target)
        seen_paths = set()
        seen_sites = set()
        for pid, witness in oracle.witnesses.items():
            result = execute(target, witness)
            assert result.path == pid
            seen_paths.add(result.path)
            seen_sites.update(result.trace)
        assert seen_paths == set(oracle.paths)
        assert seen_sites == set(oracle.branch_sites)


# ---------------------------------------------------------------------------
# DAG validation
# ---------------------------------------------------------------------------


def test_target_rejects_cycles():
    nodes = {
        "a": Node("a", LengthGe(0), Edge(1, "b"), Edge(2, "out")),
        "b": Node("b", LengthGe(1), Edge(3, "a"), Edge(4, "out")),
    }
    with pytest.raises(ValueError, match="cycle"):
        leaf_target(nodes, ["out"], "a")


def test_target_rejects_duplicate_sites():
    nodes = {"a": Node("a", LengthGe(0), Edge(1, "x"), Edge(1, "y"))}
    with pytest.raises(ValueError, match="duplicate site"):
        leaf_target(nodes, ["x", "y"], "a")


def test_target_rejects_unknown_destination():
    nodes = {"a": Node("a", LengthGe(0), Edge(1, "nowhere"), Edge(2, "out"))}
    with pytest.raises(ValueError, match="unknown destination"):
        leaf_target(nodes, ["out"], "a")


def test_target_rejects_predicate_beyond_max_len():
    nodes = {"a": Node("a", BytesEq(60, b"ABCDEFGH"), Edge(1, "x"), Edge(2, "y"))}
    with pytest.raises(ValueError, match="beyond max input length"):
        leaf_target(nodes, ["x", "y"], "a", max_len=64)


# ---------------------------------------------------------------------------
# declarative text format
# ---------------------------------------------------------------------------


def test_text_format_round_trip_motivating():
    target = builtin_motivating()
    text = format_target_spec(target)
    again = parse_target_spec(text, name=target.name)
    assert enumerate_target(again).paths == enumerate_target(target).paths
    assert again.max_input_len == target.max_input_len
    assert execute(again, two_string_input(b"Magic Str", b"Magic Num")).crashed


def test_text_format_parses_all_predicates_and_crash_leaves():
    text = """
    max_len 32
    node start bytes_eq(0,"hi\\x00there") 1:mid -:alt
    node mid u32_eq(12,305419896) 2:deep 3:shallow
    node alt byte_range(2,10,20) 4:range_yes 5:range_no
    leaf deep crash overflow@buf.c:12
    leaf shallow
    leaf range_yes
    leaf range_no
    """
    target = parse_target_spec(text)
    assert target.entry == "start"
    assert target.nodes["start"].predicate.literal == b"hi\x00there"
    assert target.nodes["mid"].predicate.value == 0x12345678
    assert target.nodes["start"].false_edge.site is None
    assert enumerate_target(target).crash_leaves == frozenset({"deep"})


def test_text_format_rejects_bad_lines():
    with pytest.raises(ValueError, match="line 1"):
        parse_target_spec('node broken nonsense(1) 1:a 2:b\nleaf a\nleaf b')
    with pytest.raises(ValueError, match="no nodes"):
        parse_target_spec("leaf only\n")


def test_random_target_round_trips_through_text():
    rng = random.Random(5)
    for _ in range(5):
        target = random_target(rng, node_count=4)
        again = parse_target_spec(format_target_spec(target), name=target.name)
        assert enumerate_target(again).paths == enumerate_target(target).paths


def test_path_ids_agree_with_coverage_module():
    # The oracle and execute must hash traces identically.
    result = execute(builtin_motivating(), two_string_input(b"Magic Str", b"x"))
    assert result.path == path_id(result.trace)
