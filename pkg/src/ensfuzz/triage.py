"""Crash backtrace parsing and unique-bug deduplication by top frame.

Two crashes are the same bug if and only if their top stack frames are
identical. The parser accepts sanitizer-style frame lines
(``#<n> 0x<hex> in <function> <file>:<line>``); toy targets attach backtraces
to their crash leaves directly, external fuzzers ship them as ``.bt`` sidecar
text files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

_FRAME_RE = re.compile(
    r"^\s*#(?P<num>\d+)\s+0x[0-9a-fA-F]+\s+in\s+(?P<func>\S+)\s+(?P<file>\S+?):(?P<line>\d+)\s*$"
)

BugKey = tuple[str, str, int]


@dataclass(frozen=True)
class Frame:
    function: str
    file: str
    line: int

    def __str__(self) -> str:
        return f"{self.function} {self.file}:{self.line}"


@dataclass(frozen=True)
class Backtrace:
    frames: tuple[Frame, ...]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("backtrace needs at least one frame")

    @property
    def top(self) -> Frame:
        return self.frames[0]

    def to_text(self) -> str:
        lines = [
            f"#{i} 0x{0x400000 + 16 * i:08x} in {f.function} {f.file}:{f.line}"
            for i, f in enumerate(self.frames)
        ]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CrashRecord:
    """One observed crashing execution; ``bug_key`` is the top frame identity."""

    seed_id: int
    fuzzer: str
    tick: int
    backtrace: Backtrace

    @property
    def bug_key(self) -> BugKey:
        top = self.backtrace.top
        return (top.function, top.file, top.line)


@dataclass(frozen=True)
class UniqueBug:
    bug_key: BugKey
    exemplar: CrashRecord
    occurrences: int


def parse_backtrace(text: str) -> Backtrace:
    """Parse sanitizer-style frame lines; frames are ordered by frame number."""
    found: list[tuple[int, Frame]] = []
    for line in text.splitlines():
        m = _FRAME_RE.match(line)
        if m is None:
            continue
        frame = Frame(m.group("func"), m.group("file"), int(m.group("line")))
        found.append((int(m.group("num")), frame))
    if not found:
        raise ValueError("unparseable backtrace")
    found.sort(key=lambda pair: pair[0])
    return Backtrace(tuple(frame for _, frame in found))


def dedup(crashes: Iterable[CrashRecord]) -> list[UniqueBug]:
    """Group crashes into unique bugs by top frame.

    The exemplar of each bug is the earliest crash (ties by lowest seed id);
    output is ordered by first-seen tick with the same tie-break.
    """
    groups: dict[BugKey, list[CrashRecord]] = {}
    for crash in crashes:
        groups.setdefault(crash.bug_key, []).append(crash)
    bugs = []
    for key, members in groups.items():
        exemplar = min(members, key=lambda c: (c.tick, c.seed_id))
        bugs.append(UniqueBug(key, exemplar, len(members)))
    bugs.sort(key=lambda b: (b.exemplar.tick, b.exemplar.seed_id, b.bug_key))
    return bugs


def unique_bug_count(state_or_crashes) -> int:
    """Number of unique bugs among the crashes routed through the monitor."""
    crashes = getattr(state_or_crashes, "crashes", state_or_crashes)
    return len(dedup(crashes))
