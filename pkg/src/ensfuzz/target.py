"""Deterministic toy instrumented targets and their brute-force path oracle.

A target is a DAG of predicate nodes over the input bytes. Taking an
instrumented edge records its site id; the ordered site trace is the path.
Crash leaves carry a backtrace template. ``enumerate_target`` walks every
branch combination, prunes infeasible ones by constructing a witness input,
and returns the ground-truth path/branch/crash inventory together with those
witnesses, so any coverage claim made by the fuzzing side can be checked
against exhaustive truth.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Union

from ensfuzz.coverage import BLOCK, EDGE, CoverageMap, path_id
from ensfuzz.triage import Backtrace, Frame

MAX_ORACLE_WALKS = 1 << 20
DEFAULT_MAX_INPUT_LEN = 4096


# ---------------------------------------------------------------------------
# Predicates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BytesEq:
    """True iff the input holds ``literal`` at ``offset`` (short inputs fail)."""

    offset: int
    literal: bytes

    def evaluate(self, data: bytes) -> bool:
        end = self.offset + len(self.literal)
        return len(data) >= end and data[self.offset:end] == self.literal

    def __str__(self) -> str:
        return f'bytes_eq({self.offset},"{_escape(self.literal)}")'


@dataclass(frozen=True)
class U32Eq:
    """True iff the input holds ``value`` little-endian at ``offset``."""

    offset: int
    value: int

    @property
    def literal(self) -> bytes:
        return self.value.to_bytes(4, "little")

    def evaluate(self, data: bytes) -> bool:
        end = self.offset + 4
        return len(data) >= end and data[self.offset:end] == self.literal

    def __str__(self) -> str:
        return f"u32_eq({self.offset},{self.value})"


@dataclass(frozen=True)
class ByteRange:
    """True iff the byte at ``offset`` exists and lies in [lo, hi]."""

    offset: int
    lo: int
    hi: int

    def evaluate(self, data: bytes) -> bool:
        return len(data) > self.offset and self.lo <= data[self.offset] <= self.hi

    def __str__(self) -> str:
        return f"byte_range({self.offset},{self.lo},{self.hi})"


@dataclass(frozen=True)
class LengthGe:
    """True iff the input is at least ``n`` bytes long."""

    n: int

    def evaluate(self, data: bytes) -> bool:
        return len(data) >= self.n

    def __str__(self) -> str:
        return f"length_ge({self.n})"


Predicate = Union[BytesEq, U32Eq, ByteRange, LengthGe]


# ---------------------------------------------------------------------------
# Target structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Edge:
    """One branch direction: an optional instrumentation site and a destination id."""

    site: Optional[int]
    dest: str


@dataclass(frozen=True)
class Node:
    id: str
    predicate: Predicate
    true_edge: Edge
    false_edge: Edge


@dataclass(frozen=True)
class Leaf:
    id: str
    crash: Optional[Backtrace] = None


@dataclass
class TargetSpec:
    name: str
    nodes: dict[str, Node]
    leaves: dict[str, Leaf]
    entry: str
    max_input_len: int = DEFAULT_MAX_INPUT_LEN

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.entry not in self.nodes:
            raise ValueError(f"entry node {self.entry!r} not defined")
        sites: set[int] = set()
        for node in self.nodes.values():
            for edge in (node.true_edge, node.false_edge):
                if edge.dest not in self.nodes and edge.dest not in self.leaves:
                    raise ValueError(f"node {node.id}: unknown destination {edge.dest!r}")
                if edge.site is not None:
                    if edge.site in sites:
                        raise ValueError(f"duplicate site id {edge.site}")
                    sites.add(edge.site)
            pred = node.predicate
            offset = getattr(pred, "offset", 0)
            span = len(getattr(pred, "literal", b"")) or 1
            if isinstance(pred, LengthGe):
                offset, span = 0, 0
            if offset + span > self.max_input_len:
                raise ValueError(f"node {node.id}: predicate beyond max input length")
        self._assert_acyclic()
        self._block_site_of = {
            bid: _block_site(bid) for bid in (*self.nodes, *self.leaves)
        }

    def _assert_acyclic(self) -> None:
        state: dict[str, int] = {}

        def visit(nid: str) -> None:
            if nid in self.leaves:
                return
            mark = state.get(nid, 0)
            if mark == 1:
                raise ValueError(f"cycle through node {nid!r}")
            if mark == 2:
                return
            state[nid] = 1
            node = self.nodes[nid]
            visit(node.true_edge.dest)
            visit(node.false_edge.dest)
            state[nid] = 2

        visit(self.entry)

    def all_sites(self) -> set[int]:
        found = set()
        for node in self.nodes.values():
            for edge in (node.true_edge, node.false_edge):
                if edge.site is not None:
                    found.add(edge.site)
        return found


@dataclass(frozen=True)
class ExecResult:
    """Outcome of one execution: edge trace, path id, both coverage maps, crash."""

    trace: tuple[int, ...]
    path: int
    leaf: str
    crashed: bool
    backtrace: Optional[Backtrace]
    edge_cover: CoverageMap
    block_cover: CoverageMap


def execute(target: TargetSpec, data: bytes) -> ExecResult:
    """Deterministically walk the target on ``data``, recording edge sites taken."""
    if len(data) > target.max_input_len:
        raise ValueError(
            f"input of {len(data)} bytes exceeds target max {target.max_input_len}"
        )
    trace: list[int] = []
    blocks: list[str] = []
    current = target.entry
    while current in target.nodes:
        node = target.nodes[current]
        blocks.append(node.id)
        edge = node.true_edge if node.predicate.evaluate(data) else node.false_edge
        if edge.site is not None:
            trace.append(edge.site)
        current = edge.dest
    leaf = target.leaves[current]
    blocks.append(leaf.id)
    edge_counts: dict[int, int] = {}
    for site in trace:
        edge_counts[site] = edge_counts.get(site, 0) + 1
    block_site_of = target._block_site_of
    block_counts = {block_site_of[b]: 1 for b in blocks}
    return ExecResult(
        trace=tuple(trace),
        path=path_id(trace),
        leaf=leaf.id,
        crashed=leaf.crash is not None,
        backtrace=leaf.crash,
        edge_cover=CoverageMap.from_counts(EDGE, edge_counts),
        block_cover=CoverageMap.from_counts(BLOCK, block_counts),
    )


@lru_cache(maxsize=4096)
def _block_site(block_id: str) -> int:
    """Stable 32-bit site id for a node/leaf id in the block coverage space."""
    h = 2166136261
    for b in block_id.encode():
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------


@dataclass
class Oracle:
    """Ground truth for a target: every feasible path, branch site, and crash leaf.

    ``witnesses`` maps each feasible path id to one input realizing it;
    ``boring_witness`` realizes the uninstrumented fall-through walk when the
    target has one (a walk whose trace is empty contributes no path).
    """

    paths: frozenset[int]
    branch_sites: frozenset[int]
    crash_leaves: frozenset[str]
    witnesses: dict[int, bytes] = field(default_factory=dict)
    boring_witness: Optional[bytes] = None


def enumerate_target(target: TargetSpec) -> Oracle:
    """Walk both edges of every node, pruning infeasible branch combinations.

    Feasibility is decided by constructing a concrete witness input for the
    accumulated predicate constraints; predicates over disjoint offsets are
    independently satisfiable, conflicting overlaps are pruned.
    """
    if _walk_count(target) > MAX_ORACLE_WALKS:
        raise ValueError("target too large for oracle")
    paths: set[int] = set()
    branch_sites: set[int] = set()
    crash_leaves: set[str] = set()
    witnesses: dict[int, bytes] = {}
    boring: list[bytes] = []
    walks = 0

    def descend(nid: str, trace: tuple[int, ...], constraints: list[tuple[Predicate, bool]]) -> None:
        nonlocal walks
        if nid in target.leaves:
            walks += 1
            if walks > MAX_ORACLE_WALKS:
                raise ValueError("target too large for oracle")
            witness = _witness(constraints, target.max_input_len)
            if witness is None:
                return
            if trace:
                pid = path_id(trace)
                paths.add(pid)
                witnesses.setdefault(pid, witness)
                branch_sites.update(trace)
            elif not boring:
                boring.append(witness)
            if target.leaves[nid].crash is not None:
                crash_leaves.add(nid)
            return
        node = target.nodes[nid]
        for branch, edge in ((True, node.true_edge), (False, node.false_edge)):
            constraints.append((node.predicate, branch))
            next_trace = trace + (edge.site,) if edge.site is not None else trace
            descend(edge.dest, next_trace, constraints)
            constraints.pop()

    descend(target.entry, (), [])
    return Oracle(
        paths=frozenset(paths),
        branch_sites=frozenset(branch_sites),
        crash_leaves=frozenset(crash_leaves),
        witnesses=witnesses,
        boring_witness=boring[0] if boring else None,
    )


def _walk_count(target: TargetSpec) -> int:
    """Number of root-to-leaf walks, ignoring feasibility (cheap DP bound)."""
    memo: dict[str, int] = {}

    def count(nid: str) -> int:
        if nid in target.leaves:
            return 1
        if nid not in memo:
            node = target.nodes[nid]
            memo[nid] = count(node.true_edge.dest) + count(node.false_edge.dest)
        return memo[nid]

    return count(target.entry)


_FULL_BYTE = frozenset(range(256))


def _witness(constraints: list[tuple[Predicate, bool]], max_len: int) -> Optional[bytes]:
    """Build one input satisfying the constraint list, or None if infeasible.

    The input length is fixed at the minimum the true-constraints demand,
    which is optimal: longer inputs only bring more false-constraints into
    range, and shorter ones cannot satisfy a true constraint. Per-byte
    allowed-value sets make equality and range interactions on overlapping
    offsets exact; failed equalities are broken greedily, preferring a byte
    value that simultaneously differs from every other failed literal
    covering the same position.
    """
    min_len = 0
    max_len_bound = max_len
    for pred, want in constraints:
        if isinstance(pred, LengthGe):
            if want:
                min_len = max(min_len, pred.n)
            else:
                max_len_bound = min(max_len_bound, pred.n - 1)
        elif want:
            if isinstance(pred, (BytesEq, U32Eq)):
                min_len = max(min_len, pred.offset + len(pred.literal))
            else:
                min_len = max(min_len, pred.offset + 1)
    if min_len > max_len_bound:
        return None
    length = min_len
    allowed: dict[int, frozenset[int]] = {}

    def restrict(pos: int, values: frozenset[int]) -> bool:
        cur = allowed.get(pos, _FULL_BYTE)
        new = cur & values
        if not new:
            return False
        allowed[pos] = new
        return True

    for pred, want in constraints:
        if want and isinstance(pred, (BytesEq, U32Eq)):
            for i, b in enumerate(pred.literal):
                if not restrict(pred.offset + i, frozenset((b,))):
                    return None

    for pred, want in constraints:
        if isinstance(pred, ByteRange):
            span_values = frozenset(range(pred.lo, pred.hi + 1))
            if want:
                if not restrict(pred.offset, span_values):
                    return None
            elif pred.offset < length:
                if not restrict(pred.offset, _FULL_BYTE - span_values):
                    return None

    false_eqs = [
        pred
        for pred, want in constraints
        if not want
        and isinstance(pred, (BytesEq, U32Eq))
        and pred.offset + len(pred.literal) <= length
    ]
    forced: dict[int, int] = {}
    for pred in false_eqs:
        span = range(pred.offset, pred.offset + len(pred.literal))
        satisfied = False
        for pos in span:
            decided = forced.get(pos)
            if decided is None:
                values = allowed.get(pos)
                if values is not None and len(values) == 1:
                    decided = next(iter(values))
            if decided is not None and decided != pred.literal[pos - pred.offset]:
                satisfied = True
                break
        if satisfied:
            continue
        candidates: list[tuple[int, frozenset[int]]] = []
        for pos in span:
            if pos in forced:
                continue
            options = allowed.get(pos, _FULL_BYTE) - {pred.literal[pos - pred.offset]}
            if options:
                candidates.append((pos, options))
        if not candidates:
            return None
        choice: Optional[tuple[int, int]] = None
        for pos, options in candidates:
            others = {
                q.literal[pos - q.offset]
                for q in false_eqs
                if q.offset <= pos < q.offset + len(q.literal)
            }
            clean = options - others
            if clean:
                choice = (pos, min(clean))
                break
        if choice is None:
            pos, options = candidates[0]
            choice = (pos, min(options))
        forced[choice[0]] = choice[1]

    data = bytearray(length)
    for pos in range(length):
        if pos in forced:
            data[pos] = forced[pos]
        elif pos in allowed:
            data[pos] = min(allowed[pos])
    return bytes(data)


# ---------------------------------------------------------------------------
# Built-in two-string target
# ---------------------------------------------------------------------------

MAGIC_STR = b"Magic Str"
MAGIC_NUM = b"Magic Num"
FIELD2_OFFSET = 16

T1, T2, T3, T4, T5, T6 = 1, 2, 3, 4, 5, 6


def builtin_motivating() -> TargetSpec:
    """Two-string target: crashes when one field is "Magic Str" and the other "Magic Num".

    Field one sits at offset 0, field two at offset 16. Entering either magic
    region takes an instrumented edge (T1 for the Str region, T2 for the Num
    region); the second comparison splits into T4/T3 and T5/T6. Inputs that
    match neither magic fall through without touching instrumentation, so the
    four instrumented leaf paths are exactly T1-T3, T1-T4, T2-T5, T2-T6.
    """
    crash_t4 = Backtrace((Frame("check_magic_pair", "magic.c", 42), Frame("main", "magic.c", 90)))
    crash_t5 = Backtrace((Frame("check_magic_pair", "magic.c", 57), Frame("main", "magic.c", 90)))
    nodes = {
        "str1_is_str": Node(
            "str1_is_str",
            BytesEq(0, MAGIC_STR),
            true_edge=Edge(T1, "str2_is_num"),
            false_edge=Edge(None, "str1_is_num"),
        ),
        "str1_is_num": Node(
            "str1_is_num",
            BytesEq(0, MAGIC_NUM),
            true_edge=Edge(T2, "str2_is_str"),
            false_edge=Edge(None, "miss"),
        ),
        "str2_is_num": Node(
            "str2_is_num",
            BytesEq(FIELD2_OFFSET, MAGIC_NUM),
            true_edge=Edge(T4, "T4"),
            false_edge=Edge(T3, "T3"),
        ),
        "str2_is_str": Node(
            "str2_is_str",
            BytesEq(FIELD2_OFFSET, MAGIC_STR),
            true_edge=Edge(T5, "T5"),
            false_edge=Edge(T6, "T6"),
        ),
    }
    leaves = {
        "T3": Leaf("T3"),
        "T4": Leaf("T4", crash=crash_t4),
        "T5": Leaf("T5", crash=crash_t5),
        "T6": Leaf("T6"),
        "miss": Leaf("miss"),
    }
    return TargetSpec("motivating", nodes, leaves, entry="str1_is_str", max_input_len=64)


def two_string_input(first: bytes, second: bytes) -> bytes:
    """Lay out the two string fields of the built-in target (offsets 0 and 16)."""
    if len(first) > FIELD2_OFFSET:
        raise ValueError("first field too long")
    return first.ljust(FIELD2_OFFSET, b"\x00") + second


# ---------------------------------------------------------------------------
# Declarative text format
# ---------------------------------------------------------------------------

_PRED_RE = re.compile(r"^(?P<name>[a-z0-9_]+)\((?P<args>.*)\)$")


def _escape(literal: bytes) -> str:
    out = []
    for b in literal:
        ch = chr(b)
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif 32 <= b < 127:
            out.append(ch)
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def _unescape(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            if i + 1 >= len(text):
                raise ValueError("dangling escape in literal")
            nxt = text[i + 1]
            if nxt == "x":
                out.append(int(text[i + 2:i + 4], 16))
                i += 4
                continue
            out.append(ord(nxt))
            i += 2
            continue
        out.append(ord(ch))
        i += 1
    return bytes(out)


def _parse_predicate(text: str) -> Predicate:
    m = _PRED_RE.match(text)
    if m is None:
        raise ValueError(f"bad predicate {text!r}")
    name, args = m.group("name"), m.group("args")
    if name == "bytes_eq":
        offset_str, _, lit = args.partition(",")
        lit = lit.strip()
        if not (lit.startswith('"') and lit.endswith('"')):
            raise ValueError(f"bytes_eq literal must be quoted in {text!r}")
        return BytesEq(int(offset_str), _unescape(lit[1:-1]))
    parts = [p.strip() for p in args.split(",")]
    if name == "u32_eq":
        return U32Eq(int(parts[0]), int(parts[1], 0))
    if name == "byte_range":
        return ByteRange(int(parts[0]), int(parts[1]), int(parts[2]))
    if name == "length_ge":
        return LengthGe(int(parts[0]))
    raise ValueError(f"unknown predicate {name!r}")


def _split_fields(line: str) -> list[str]:
    """Split on whitespace, keeping quoted predicate arguments intact."""
    fields = []
    buf = []
    quoted = False
    for ch in line:
        if ch == '"' and (not buf or buf[-1] != "\\"):
            quoted = not quoted
        if ch.isspace() and not quoted:
            if buf:
                fields.append("".join(buf))
                buf = []
        else:
            buf.append(ch)
    if buf:
        fields.append("".join(buf))
    return fields


def parse_target_spec(text: str, name: str = "custom") -> TargetSpec:
    """Load a target from its declarative one-definition-per-line text form.

    Lines: ``node <id> <predicate> <true-site>:<next> <false-site>:<next>``
    and ``leaf <id> [crash <function>@<file>:<line>]``; a site of ``-`` means
    the edge is uninstrumented. The first node is the entry. ``max_len <n>``
    overrides the input cap, ``#`` starts a comment.
    """
    nodes: dict[str, Node] = {}
    leaves: dict[str, Leaf] = {}
    entry: Optional[str] = None
    max_len = DEFAULT_MAX_INPUT_LEN
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = _split_fields(line)
        try:
            if fields[0] == "max_len":
                max_len = int(fields[1])
            elif fields[0] == "node":
                _, nid, pred_text, true_text, false_text = fields
                nodes[nid] = Node(
                    nid,
                    _parse_predicate(pred_text),
                    _parse_edge(true_text),
                    _parse_edge(false_text),
                )
                if entry is None:
                    entry = nid
            elif fields[0] == "leaf":
                leaves[fields[1]] = _parse_leaf(fields)
            else:
                raise ValueError(f"unknown directive {fields[0]!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    if entry is None:
        raise ValueError("target spec defines no nodes")
    return TargetSpec(name, nodes, leaves, entry, max_input_len=max_len)


def _parse_edge(text: str) -> Edge:
    site_text, sep, dest = text.partition(":")
    if not sep or not dest:
        raise ValueError(f"bad edge {text!r}")
    site = None if site_text == "-" else int(site_text)
    return Edge(site, dest)


def _parse_leaf(fields: list[str]) -> Leaf:
    if len(fields) == 2:
        return Leaf(fields[1])
    if len(fields) == 4 and fields[2] == "crash":
        func, _, loc = fields[3].partition("@")
        file, _, line = loc.rpartition(":")
        if not func or not file:
            raise ValueError(f"bad crash frame {fields[3]!r}")
        bt = Backtrace((Frame(func, file, int(line)),))
        return Leaf(fields[1], crash=bt)
    raise ValueError(f"bad leaf line {' '.join(fields)!r}")


def format_target_spec(target: TargetSpec) -> str:
    """Serialize a target back to the declarative text form."""
    lines = [f"max_len {target.max_input_len}"]
    ordered = [target.entry] + [nid for nid in target.nodes if nid != target.entry]
    for nid in ordered:
        node = target.nodes[nid]
        t, f = node.true_edge, node.false_edge
        t_text = f"{'-' if t.site is None else t.site}:{t.dest}"
        f_text = f"{'-' if f.site is None else f.site}:{f.dest}"
        lines.append(f"node {nid} {node.predicate} {t_text} {f_text}")
    for leaf in target.leaves.values():
        if leaf.crash is None:
            lines.append(f"leaf {leaf.id}")
        else:
            top = leaf.crash.top
            lines.append(f"leaf {leaf.id} crash {top.function}@{top.file}:{top.line}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Random targets for the property and acceptance suites
# ---------------------------------------------------------------------------


def random_target(
    rng: random.Random,
    node_count: int = 6,
    max_len: int = 32,
    crash_fraction: float = 0.3,
    share_prob: float = 0.6,
    tree: bool = False,
) -> TargetSpec:
    """Generate a random fully-instrumented DAG target with ``node_count`` nodes.

    Nodes are topologically ordered; every edge goes to a later node or a
    fresh leaf, and every edge carries a unique site id, so every feasible
    walk contributes a path. With ``tree=True`` no interior node is targeted
    twice, so every reachable node has a unique in-edge.
    """
    if node_count < 1:
        raise ValueError("need at least one node")
    nodes: dict[str, Node] = {}
    leaves: dict[str, Leaf] = {}
    next_site = 1

    def fresh_leaf(index: int) -> str:
        lid = f"L{index}"
        if rng.random() < crash_fraction:
            bt = Backtrace(
                (Frame(f"crash_fn_{rng.randint(0, 3)}", "toy.c", 100 + rng.randint(0, 3)),)
            )
            leaves[lid] = Leaf(lid, crash=bt)
        else:
            leaves[lid] = Leaf(lid)
        return lid

    def random_predicate() -> Predicate:
        kind = rng.randrange(4)
        offset = rng.randrange(max_len - 4)
        if kind == 0:
            lit = bytes(rng.randrange(1, 256) for _ in range(rng.randint(1, 3)))
            return BytesEq(offset, lit)
        if kind == 1:
            return U32Eq(offset, rng.randrange(1, 1 << 32))
        if kind == 2:
            lo = rng.randrange(0, 200)
            return ByteRange(offset, lo, lo + rng.randrange(1, 55))
        return LengthGe(rng.randrange(0, max_len))

    leaf_index = 0
    taken: set[int] = set()
    for i in range(node_count):
        dests = []
        for _ in range(2):
            later = [j for j in range(i + 1, node_count) if not (tree and j in taken)]
            if later and rng.random() < share_prob:
                pick = rng.choice(later)
                taken.add(pick)
                dests.append(f"N{pick}")
            else:
                dests.append(fresh_leaf(leaf_index))
                leaf_index += 1
        nid = f"N{i}"
        nodes[nid] = Node(
            nid,
            random_predicate(),
            true_edge=Edge(next_site, dests[0]),
            false_edge=Edge(next_site + 1, dests[1]),
        )
        next_site += 2
    return TargetSpec(
        f"random-{rng.randrange(1 << 16)}", nodes, leaves, entry="N0", max_input_len=max_len
    )
