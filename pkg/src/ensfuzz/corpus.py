"""Seeds, the global seed pool with sync flags, and per-fuzzer local queues.

The pool is the globally-asynchronous half of the synchronization mechanism:
producers push seeds without coordination and the monitor later walks the
unsynced ones. Local queues belong to exactly one fuzzer; the monitor delivers
seeds to them only at sync-round boundaries.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping, Optional

from ensfuzz.coverage import fnv1a_64

MAX_SEED_SIZE = 4096

CAUSE_INITIAL = "initial"
CAUSE_NEW_COVERAGE = "new_coverage"
CAUSE_CRASH = "crash"
CAUSES = (CAUSE_INITIAL, CAUSE_NEW_COVERAGE, CAUSE_CRASH)

ROUND_ROBIN = "round_robin"
RARE_BRANCH = "rare_branch"
LOW_FREQ_PATH = "low_freq_path"
SELECTION_POLICIES = (ROUND_ROBIN, RARE_BRANCH, LOW_FREQ_PATH)


@dataclass(frozen=True)
class Seed:
    """One test input plus provenance; ``id`` is the FNV-1a-64 of the content."""

    id: int
    content: bytes
    origin: str
    birth_tick: int
    cause: str

    @classmethod
    def make(
        cls,
        content: bytes,
        origin: str = "initial",
        birth_tick: int = 0,
        cause: str = CAUSE_INITIAL,
        max_size: int = MAX_SEED_SIZE,
    ) -> Seed:
        if len(content) > max_size:
            raise ValueError(f"seed content of {len(content)} bytes exceeds cap {max_size}")
        if cause not in CAUSES:
            raise ValueError(f"unknown seed cause {cause!r}")
        return cls(fnv1a_64(content), content, origin, birth_tick, cause)


class GlobalSeedPool:
    """Ordered, content-deduplicated seed pool with a per-seed synced flag."""

    def __init__(self) -> None:
        self._entries: list[Seed] = []
        self._synced: dict[int, bool] = {}
        # Compacting overlay so unsynced() stays linear in the number of
        # still-unsynced seeds rather than the whole pool.
        self._pending: list[Seed] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, seed_id: int) -> bool:
        return seed_id in self._synced

    def push(self, seed: Seed) -> bool:
        """Insert with synced=False; a duplicate id is a no-op returning False."""
        if seed.id in self._synced:
            return False
        self._entries.append(seed)
        self._pending.append(seed)
        self._synced[seed.id] = False
        return True

    def unsynced(self) -> list[Seed]:
        """All entries still awaiting synchronization, in insertion order."""
        self._pending = [s for s in self._pending if not self._synced[s.id]]
        return list(self._pending)

    def mark_synced(self, seed_id: int) -> None:
        if seed_id not in self._synced:
            raise KeyError(f"unknown seed {seed_id:016x}")
        self._synced[seed_id] = True

    def is_synced(self, seed_id: int) -> bool:
        if seed_id not in self._synced:
            raise KeyError(f"unknown seed {seed_id:016x}")
        return self._synced[seed_id]

    def seeds(self) -> list[Seed]:
        return list(self._entries)

    def get(self, seed_id: int) -> Seed:
        for seed in self._entries:
            if seed.id == seed_id:
                return seed
        raise KeyError(f"unknown seed {seed_id:016x}")


class LocalQueue:
    """FIFO of seeds owned by one fuzzer; duplicate ids are rejected.

    Keeps the round-robin cursor so a cyclic sweep visits every member once
    before revisiting any.
    """

    def __init__(self, owner: str) -> None:
        self.owner = owner
        self.items: list[Seed] = []
        self._ids: set[int] = set()
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, seed_id: int) -> bool:
        return seed_id in self._ids

    def push(self, seed: Seed) -> bool:
        if seed.id in self._ids:
            return False
        self.items.append(seed)
        self._ids.add(seed.id)
        return True


@dataclass
class SelectionContext:
    """Per-fuzzer observation counters that the non-trivial policies consume.

    ``site_counts`` counts executions hitting each site, ``path_freqs`` counts
    executions per path id, and the two seed maps record what each queued
    seed's own execution touched.
    """

    site_counts: Mapping[int, int] = field(default_factory=dict)
    path_freqs: Mapping[int, int] = field(default_factory=dict)
    seed_sites: Mapping[int, frozenset[int]] = field(default_factory=dict)
    seed_paths: Mapping[int, int] = field(default_factory=dict)


def queue_select(
    queue: LocalQueue,
    policy: str,
    rng: random.Random,
    ctx: Optional[SelectionContext] = None,
) -> Seed:
    """Pick the next seed to mutate according to the selection policy.

    - ``round_robin``: cyclic sweep over the queue.
    - ``rare_branch``: the seed covering the globally rarest site, ties by
      lowest seed id.
    - ``low_freq_path``: sample weighted by the inverse execution frequency
      of each seed's path.
    """
    if not queue.items:
        raise ValueError("queue empty")
    if policy == ROUND_ROBIN:
        seed = queue.items[queue.cursor % len(queue.items)]
        queue.cursor += 1
        return seed
    if policy == RARE_BRANCH:
        return _select_rare_branch(queue, rng, ctx)
    if policy == LOW_FREQ_PATH:
        return _select_low_freq_path(queue, rng, ctx)
    raise ValueError(f"unknown selection policy {policy!r}")


def _select_rare_branch(
    queue: LocalQueue, rng: random.Random, ctx: Optional[SelectionContext]
) -> Seed:
    seed_sites = ctx.seed_sites if ctx else {}
    covered = sorted({site for s in queue.items for site in seed_sites.get(s.id, ())})
    if not covered:
        # No coverage recorded yet for any queued seed; degrade to a sweep.
        seed = queue.items[queue.cursor % len(queue.items)]
        queue.cursor += 1
        return seed
    counts = ctx.site_counts if ctx else {}
    rarest = min(covered, key=lambda site: (counts.get(site, 0), site))
    candidates = [s for s in queue.items if rarest in seed_sites.get(s.id, ())]
    return min(candidates, key=lambda s: s.id)


def _select_low_freq_path(
    queue: LocalQueue, rng: random.Random, ctx: Optional[SelectionContext]
) -> Seed:
    seed_paths = ctx.seed_paths if ctx else {}
    freqs = ctx.path_freqs if ctx else {}
    weights = []
    for s in queue.items:
        path = seed_paths.get(s.id)
        freq = freqs.get(path, 1) if path is not None else 1
        weights.append(1.0 / max(1, freq))
    total = sum(weights)
    pick = rng.random() * total
    acc = 0.0
    for seed, w in zip(queue.items, weights):
        acc += w
        if pick < acc:
            return seed
    return queue.items[-1]
