"""The local fuzzing loop, parameterized by selection/mutation/granularity plugins.

One worker owns one queue and one local coverage map. Each tick it selects a
seed, produces a batch of mutants, executes them, keeps the interesting ones
(new local coverage or a crash) in its own queue, and submits them to the
global pool channel. Workers share nothing; seeds arrive only through
monitor dispatch, and a dispatched seed is executed once on receipt so the
local map knows what it already covers.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

from ensfuzz.corpus import (
    CAUSE_CRASH,
    CAUSE_NEW_COVERAGE,
    LOW_FREQ_PATH,
    MAX_SEED_SIZE,
    SELECTION_POLICIES,
    LocalQueue,
    Seed,
    SelectionContext,
    queue_select,
)
from ensfuzz.coverage import CoverageMap, fnv1a_64, merge_in_place, new_bits
from ensfuzz.target import ExecResult, TargetSpec, execute
from ensfuzz.triage import CrashRecord

BITFLIP = "bitflip"
BYTE_ARITH = "byte_arith"
HAVOC = "havoc"
DICTIONARY_SPLICE = "dictionary_splice"
BLOCK_GUIDED_HAVOC = "block_guided_havoc"
MUTATION_STRATEGIES = (BITFLIP, BYTE_ARITH, HAVOC, DICTIONARY_SPLICE, BLOCK_GUIDED_HAVOC)

MAX_ARITH_DELTA = 35
MAX_RESTARTS_PER_TICK = 1000
ENERGY_FACTOR_CAP = 8

_INTERESTING_BYTES = (0, 1, 127, 128, 255)


class CrashStormError(RuntimeError):
    """Raised when a crash-halting worker restarts too often in one tick."""


class PoolChannel(Protocol):
    """The ordered submission side of the global seed pool."""

    def submit(self, seed: Seed, crash: Optional[CrashRecord] = None) -> bool:
        """Queue a seed for the pool; returns False for content already pooled."""
        ...


@dataclass
class FuzzerConfig:
    """Static description of one base fuzzer in the ensemble."""

    name: str
    selection: str = "round_robin"
    mutation: str = HAVOC
    granularity: str = "edge"
    generation_dictionary: Optional[list[bytes]] = None
    halts_on_crash: bool = False
    rng_seed: Optional[int] = None
    mutations_per_seed: int = 8

    def validate(self) -> None:
        if not self.name:
            raise ValueError("fuzzer needs a name")
        if self.selection not in SELECTION_POLICIES:
            raise ValueError(f"{self.name}: unknown selection policy {self.selection!r}")
        if self.mutation not in MUTATION_STRATEGIES:
            raise ValueError(f"{self.name}: unknown mutation strategy {self.mutation!r}")
        if self.granularity not in ("edge", "block"):
            raise ValueError(f"{self.name}: unknown granularity {self.granularity!r}")
        if self.mutations_per_seed < 1:
            raise ValueError(f"{self.name}: mutations_per_seed must be >= 1")
        if self.mutation == DICTIONARY_SPLICE and not self.generation_dictionary:
            raise ValueError(f"{self.name}: dictionary_splice requires tokens")


@dataclass
class FuzzerStats:
    execs: int = 0
    seeds_contributed: int = 0
    last_new_coverage_tick: int = 0
    restarts: int = 0


@dataclass
class TickReport:
    execs: int = 0
    new_seeds: int = 0
    new_crashes: int = 0


@dataclass
class FuzzerState:
    """Mutable worker state: queue, local map, observation counters, rng."""

    config: FuzzerConfig
    rng: random.Random
    queue: LocalQueue = field(init=False)
    local_cover: CoverageMap = field(init=False)
    crashes_found: list[CrashRecord] = field(default_factory=list)
    stats: FuzzerStats = field(default_factory=FuzzerStats)
    energy: int = field(init=False)
    pending: list[Seed] = field(default_factory=list)
    path_freqs: dict[int, int] = field(default_factory=dict)
    site_counts: dict[int, int] = field(default_factory=dict)
    seed_sites: dict[int, frozenset[int]] = field(default_factory=dict)
    seed_paths: dict[int, int] = field(default_factory=dict)
    terminated: bool = False

    def __post_init__(self) -> None:
        self.config.validate()
        self.queue = LocalQueue(self.config.name)
        self.local_cover = CoverageMap.empty(self.config.granularity)
        self.energy = self.config.mutations_per_seed

    @property
    def name(self) -> str:
        return self.config.name

    def receive(self, seed: Seed) -> bool:
        """Accept a dispatched seed; it joins the queue at the next tick."""
        if seed.id in self.queue or any(s.id == seed.id for s in self.pending):
            return False
        self.pending.append(seed)
        return True

    def cover_of(self, result: ExecResult) -> CoverageMap:
        return result.edge_cover if self.config.granularity == "edge" else result.block_cover

    def observe(self, result: ExecResult) -> None:
        """Fold an execution into the local map and the selection counters."""
        merge_in_place(self.local_cover, self.cover_of(result))
        if result.trace:
            self.path_freqs[result.path] = self.path_freqs.get(result.path, 0) + 1
        for site in set(result.trace):
            self.site_counts[site] = self.site_counts.get(site, 0) + 1

    def selection_context(self) -> SelectionContext:
        return SelectionContext(
            site_counts=self.site_counts,
            path_freqs=self.path_freqs,
            seed_sites=self.seed_sites,
            seed_paths=self.seed_paths,
        )


def make_state(config: FuzzerConfig, ensemble_seed: int = 0) -> FuzzerState:
    """Construct worker state with a deterministic per-fuzzer rng."""
    seed = config.rng_seed
    if seed is None:
        seed = fnv1a_64(f"{ensemble_seed}:{config.name}".encode())
    return FuzzerState(config=config, rng=random.Random(seed))


# ---------------------------------------------------------------------------
# Mutation strategies
# ---------------------------------------------------------------------------


def mutate(
    seed,
    strategy: str,
    rng: random.Random,
    dictionary: Optional[list[bytes]] = None,
    max_len: int = MAX_SEED_SIZE,
) -> bytes:
    """Produce one mutant of the seed content under the given strategy."""
    data = seed.content if isinstance(seed, Seed) else bytes(seed)
    if strategy == BITFLIP:
        return _bitflip(data, rng)
    if strategy == BYTE_ARITH:
        return _byte_arith(data, rng)
    if strategy in (HAVOC, BLOCK_GUIDED_HAVOC):
        return _havoc(data, rng, max_len)
    if strategy == DICTIONARY_SPLICE:
        if not dictionary:
            raise ValueError("dictionary_splice requires tokens")
        return _dictionary_splice(data, rng, dictionary, max_len)
    raise ValueError(f"unknown mutation strategy {strategy!r}")


def _bitflip(data: bytes, rng: random.Random) -> bytes:
    if not data:
        data = b"\x00"
    k = rng.choice((1, 1, 1, 2, 4))
    out = bytearray(data)
    for bit in rng.sample(range(len(out) * 8), min(k, len(out) * 8)):
        out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


def _byte_arith(data: bytes, rng: random.Random) -> bytes:
    if not data:
        data = b"\x00"
    out = bytearray(data)
    pos = rng.randrange(len(out))
    delta = rng.randint(1, MAX_ARITH_DELTA) * rng.choice((1, -1))
    out[pos] = (out[pos] + delta) % 256
    return bytes(out)


def _havoc(data: bytes, rng: random.Random, max_len: int) -> bytes:
    out = bytearray(data)
    for _ in range(rng.randint(1, 8)):
        op = rng.randrange(5)
        if op == 0 and out:
            bit = rng.randrange(len(out) * 8)
            out[bit // 8] ^= 1 << (bit % 8)
        elif op == 1 and out:
            out[rng.randrange(len(out))] = rng.choice(_INTERESTING_BYTES)
        elif op == 2 and out:
            pos = rng.randrange(len(out))
            out[pos] = (out[pos] + rng.randint(1, MAX_ARITH_DELTA) * rng.choice((1, -1))) % 256
        elif op == 3 and len(out) < max_len:
            out.insert(rng.randint(0, len(out)), rng.randrange(256))
        elif op == 4 and out:
            del out[rng.randrange(len(out))]
    return bytes(out[:max_len])


def _dictionary_splice(
    data: bytes, rng: random.Random, dictionary: list[bytes], max_len: int
) -> bytes:
    token = dictionary[rng.randrange(len(dictionary))]
    offset = rng.randint(0, len(data) + len(token))
    overwrite = rng.random() < 0.5
    out = bytearray(data)
    if offset > len(out):
        out.extend(b"\x00" * (offset - len(out)))
    if overwrite:
        out[offset:offset + len(token)] = token
    else:
        out[offset:offset] = token
    return bytes(out[:max_len])


# ---------------------------------------------------------------------------
# The fuzzing loop
# ---------------------------------------------------------------------------

Observer = Callable[[bytes, ExecResult, str], None]


def fuzz_tick(
    state: FuzzerState,
    target: TargetSpec,
    pool_channel: PoolChannel,
    tick: int,
    observer: Optional[Observer] = None,
) -> TickReport:
    """Run one fuzzing step: drain dispatches, pick a seed, mutate and execute.

    Crashing mutants are recorded and pushed to both the local queue and the
    pool (cause ``crash``); mutants with new local coverage likewise (cause
    ``new_coverage``); everything else is discarded. Under ``halts_on_crash``
    every crash halts the worker and the supervisor restart consumes one
    execution from the tick budget; more than ``MAX_RESTARTS_PER_TICK``
    restarts in one tick aborts the run as a crash storm.
    """
    _drain_dispatches(state, target)
    if not state.queue.items:
        return TickReport()

    seed = queue_select(state.queue, state.config.selection, state.rng, state.selection_context())
    budget = _tick_energy(state, seed)
    report = TickReport()
    restarts_this_tick = 0

    while budget > 0:
        data = mutate(
            seed, state.config.mutation, state.rng, state.config.generation_dictionary
        )
        if len(data) > target.max_input_len:
            data = data[: target.max_input_len]
        result = execute(target, data)
        budget -= 1
        state.stats.execs += 1
        report.execs += 1

        fresh = new_bits(state.local_cover, state.cover_of(result))
        if result.crashed:
            decision = "crash"
            mutant = Seed.make(data, origin=state.name, birth_tick=tick, cause=CAUSE_CRASH)
            record = CrashRecord(mutant.id, state.name, tick, result.backtrace)
            state.crashes_found.append(record)
            report.new_crashes += 1
            _keep(state, mutant, result, pool_channel, record)
        elif fresh:
            decision = "new_coverage"
            report.new_seeds += 1
            mutant = Seed.make(data, origin=state.name, birth_tick=tick, cause=CAUSE_NEW_COVERAGE)
            _keep(state, mutant, result, pool_channel, None)
        else:
            decision = "discard"
        state.observe(result)
        if observer is not None:
            observer(data, result, decision)

        if result.crashed and state.config.halts_on_crash:
            restarts_this_tick += 1
            state.stats.restarts += 1
            if restarts_this_tick > MAX_RESTARTS_PER_TICK:
                raise CrashStormError(f"crash storm: {state.name} restarted {restarts_this_tick} times in one tick")
            budget -= 1  # the restart consumes one execution slot
    return report


def _drain_dispatches(state: FuzzerState, target: TargetSpec) -> None:
    pending, state.pending = state.pending, []
    for seed in pending:
        if not state.queue.push(seed):
            continue
        result = execute(target, seed.content)
        state.stats.execs += 1
        state.observe(result)
        _remember_seed(state, seed, result)


def _remember_seed(state: FuzzerState, seed: Seed, result: ExecResult) -> None:
    state.seed_sites[seed.id] = frozenset(result.trace)
    if result.trace:
        state.seed_paths[seed.id] = result.path


def _tick_energy(state: FuzzerState, seed: Seed) -> int:
    """Base energy, boosted for seeds on low-frequency paths (capped at 8x)."""
    base = state.energy
    if state.config.selection != LOW_FREQ_PATH:
        return base
    path = state.seed_paths.get(seed.id)
    if path is None or not state.path_freqs:
        return base
    freqs = [state.path_freqs.get(state.seed_paths[s.id], 1)
             for s in state.queue.items if s.id in state.seed_paths]
    if not freqs:
        return base
    mean_freq = sum(freqs) / len(freqs)
    own = max(1, state.path_freqs.get(path, 1))
    factor = min(ENERGY_FACTOR_CAP, math.ceil(mean_freq / own))
    return base * max(1, factor)


def _keep(
    state: FuzzerState,
    mutant: Seed,
    result: ExecResult,
    pool_channel: PoolChannel,
    record: Optional[CrashRecord],
) -> None:
    if state.queue.push(mutant):
        _remember_seed(state, mutant, result)
    if pool_channel.submit(mutant, record):
        state.stats.seeds_contributed += 1
        state.stats.last_new_coverage_tick = mutant.birth_tick
