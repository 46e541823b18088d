"""The global monitor: owns the pool and global coverage, runs sync rounds.

Simulation runs in lock-step ticks: every live worker takes one fuzzing step
per tick, and every ``sync_period`` ticks the monitor walks the unsynced pool
seeds, executes each under every fuzzer's coverage granularity, merges the
matching global map, and dispatches the seed to the queues of fuzzers it is
interesting for. Workers never block on the monitor; dispatch messages are
the only inbound path into a worker. An optional reallocation policy
terminates or de-prioritizes fuzzers that stall.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from ensfuzz import fsproto
from ensfuzz.basefuzzer import FuzzerConfig, FuzzerState, fuzz_tick, make_state
from ensfuzz.corpus import CAUSE_INITIAL, GlobalSeedPool, Seed
from ensfuzz.coverage import BLOCK, EDGE, CoverageMap, merge_in_place
from ensfuzz.fsproto import ExternalAdapter, ExternalFuzzerConfig, Workdir
from ensfuzz.target import TargetSpec, execute
from ensfuzz.triage import CrashRecord

logger = logging.getLogger(__name__)

DEFAULT_SYNC_PERIOD = 20
REAL_MODE_SYNC_PERIOD_S = 120.0

TERMINATE_AND_REPLACE = "terminate_and_replace"
BOOST_SLOTS = "boost_slots"


@dataclass
class ReallocationPolicy:
    """Stall handling: replace a stalled fuzzer with a spare, or shift energy."""

    stall_window: int
    action: str = TERMINATE_AND_REPLACE

    def validate(self) -> None:
        if self.stall_window < 1:
            raise ValueError("stall_window must be >= 1")
        if self.action not in (TERMINATE_AND_REPLACE, BOOST_SLOTS):
            raise ValueError(f"unknown reallocation action {self.action!r}")


@dataclass
class EnsembleConfig:
    fuzzers: list[FuzzerConfig]
    initial_seeds: list[bytes] = field(default_factory=list)
    sync_period: int = DEFAULT_SYNC_PERIOD
    run_budget: int = 400
    seed_sync: bool = True
    rng_seed: int = 0
    reallocation: Optional[ReallocationPolicy] = None
    spares: list[FuzzerConfig] = field(default_factory=list)

    def validate(self) -> None:
        if not self.fuzzers:
            raise ValueError("ensemble needs at least one fuzzer")
        if self.sync_period < 1:
            raise ValueError("sync_period must be >= 1")
        if self.run_budget < 0:
            raise ValueError("run_budget must be >= 0")
        names = [f.name for f in self.fuzzers] + [s.name for s in self.spares]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValueError(f"duplicate fuzzer names: {sorted(dupes)}")
        for cfg in self.fuzzers + self.spares:
            cfg.validate()
        if self.reallocation is not None:
            self.reallocation.validate()


@dataclass(frozen=True)
class ReplayEvent:
    """One audit-log line: what the monitor or a worker did, and to which seed."""

    tick: int
    actor: str
    kind: str
    seed_id: int
    sites: int

    def to_line(self) -> str:
        return (
            f"tick={self.tick} actor={self.actor} event={self.kind} "
            f"seed={self.seed_id:016x} sites={self.sites}"
        )


@dataclass(frozen=True)
class TimelinePoint:
    tick: int
    paths: int
    branches: int
    unique_bugs: int


@dataclass
class RoundReport:
    dispatched: int = 0
    new_global_bits: int = 0
    new_crashes: int = 0


class GlobalState:
    """Monitor-owned state: pool, global maps, crashes, timeline, replay log."""

    def __init__(self, config: Optional[EnsembleConfig] = None) -> None:
        self.config = config
        self.pool = GlobalSeedPool()
        self.global_edge_cover = CoverageMap.empty(EDGE)
        self.global_block_cover = CoverageMap.empty(BLOCK)
        self.crashes: list[CrashRecord] = []
        self.timeline: list[TimelinePoint] = []
        self.replay_log: list[ReplayEvent] = []
        self.workers: dict[str, FuzzerState] = {}
        self.retired: dict[str, FuzzerState] = {}
        self.path_ids: set[int] = set()
        self.branch_sites: set[int] = set()
        self.bug_keys: set[tuple] = set()
        self.tick = 0
        self.spares: list[FuzzerConfig] = list(config.spares) if config else []
        # First evaluation of each pool seed, for per-fuzzer attribution.
        self.seed_eval: dict[int, tuple[Optional[int], frozenset[int]]] = {}

    # -- pool channel ------------------------------------------------------

    def submit(self, seed: Seed, crash: Optional[CrashRecord] = None) -> bool:
        """Serialized append point for producers (the pool channel).

        Crash reports ride along and are always routed to triage, even when
        the seed itself is a duplicate.
        """
        if crash is not None:
            self.crashes.append(crash)
            self.bug_keys.add(crash.bug_key)
            self.log(self.tick, seed.origin, "crash_report", seed.id, 0)
        inserted = self.pool.push(seed)
        kind = "submit" if inserted else "submit_dup"
        self.log(self.tick, seed.origin, kind, seed.id, 0)
        return inserted

    def log(self, tick: int, actor: str, kind: str, seed_id: int, sites: int) -> None:
        self.replay_log.append(ReplayEvent(tick, actor, kind, seed_id, sites))

    def replay_lines(self) -> str:
        return "\n".join(ev.to_line() for ev in self.replay_log) + "\n"

    def live_workers(self) -> list[FuzzerState]:
        return [w for w in self.workers.values() if not w.terminated]

    def global_map_for(self, granularity: str) -> CoverageMap:
        return self.global_edge_cover if granularity == EDGE else self.global_block_cover

    def unique_bugs(self) -> int:
        return len(self.bug_keys)

    def snapshot(self, tick: int) -> None:
        self.timeline.append(
            TimelinePoint(tick, len(self.path_ids), len(self.branch_sites), self.unique_bugs())
        )


def setup(config: EnsembleConfig, target: TargetSpec) -> GlobalState:
    """Construct workers, seed the pool (an empty seed if none are given).

    Initial seeds are delivered straight into every worker's queue, the way a
    fuzzer starts from its seed corpus; the pool entries stay unsynced so the
    first sync round still evaluates them against the global maps.
    """
    config.validate()
    state = GlobalState(config)
    for cfg in config.fuzzers:
        state.workers[cfg.name] = make_state(cfg, config.rng_seed)
    contents = config.initial_seeds if config.initial_seeds else [b""]
    for content in contents:
        seed = Seed.make(content, origin="initial", birth_tick=0, cause=CAUSE_INITIAL)
        if not state.pool.push(seed):
            continue
        state.log(0, "monitor", "seed_init", seed.id, 0)
        for worker in state.workers.values():
            worker.receive(seed)
    return state


@dataclass
class _RoundMember:
    """One synchronization target: a base fuzzer's granularity plus delivery hooks."""

    name: str
    granularity: str
    deliver: Callable[[Seed], bool]


def _round(
    state: GlobalState,
    target: TargetSpec,
    tick: int,
    members: list[_RoundMember],
    dispatch_enabled: bool,
) -> RoundReport:
    report = RoundReport()
    for seed in state.pool.unsynced():
        # One execution serves every member's evaluation: the target is a
        # pure function, so per-fuzzer runs of the same seed are identical.
        result = execute(target, seed.content)
        for member in members:
            cover = (
                result.edge_cover if member.granularity == EDGE else result.block_cover
            )
            # The monitor owns the global maps and only mutates them here.
            fresh = merge_in_place(state.global_map_for(member.granularity), cover)
            report.new_global_bits += sum(bin(m).count("1") for m in fresh.values())
            if result.trace:
                state.path_ids.add(result.path)
                state.branch_sites.update(result.trace)
            if seed.id not in state.seed_eval:
                path = result.path if result.trace else None
                state.seed_eval[seed.id] = (path, frozenset(result.trace))
            state.log(tick, member.name, "sync_eval", seed.id, len(cover.slots))

            if result.crashed and fresh:
                record = CrashRecord(seed.id, seed.origin, tick, result.backtrace)
                state.crashes.append(record)
                state.bug_keys.add(record.bug_key)
                report.new_crashes += 1
            elif not fresh:
                continue
            if not dispatch_enabled:
                continue
            if seed.origin == member.name:
                continue
            if member.deliver(seed):
                report.dispatched += 1
                state.log(tick, member.name, "dispatch", seed.id, len(cover.slots))
        state.pool.mark_synced(seed.id)
        state.log(tick, "monitor", "synced", seed.id, 0)
    return report


def sync_round(
    state: GlobalState,
    target: TargetSpec,
    tick: int,
    dispatch_enabled: bool = True,
) -> RoundReport:
    """Evaluate every unsynced pool seed against every fuzzer (Algorithm 2 round).

    For each (seed, fuzzer) pair the monitor executes the seed once, diffs
    the coverage at the fuzzer's granularity against the matching global map,
    merges it, and dispatches the seed to the fuzzer's queue when the diff is
    nonempty; a crashing seed is additionally recorded in the global crash
    list. Dispatch is skipped for the seed's own origin and for queues that
    already hold it. Seeds arriving mid-round wait for the next round.
    """

    def member_for(worker: FuzzerState) -> _RoundMember:
        def deliver(seed: Seed, w: FuzzerState = worker) -> bool:
            if seed.id in w.queue:
                return False
            return w.receive(seed)

        return _RoundMember(worker.name, worker.config.granularity, deliver)

    members = [member_for(w) for w in state.live_workers()]
    return _round(state, target, tick, members, dispatch_enabled)


def reallocate(state: GlobalState, policy: ReallocationPolicy, tick: int) -> list[str]:
    """Apply the stall policy; returns human-readable action descriptions."""
    actions: list[str] = []
    stalled = [
        w for w in state.live_workers()
        if tick - w.stats.last_new_coverage_tick > policy.stall_window
    ]
    if not stalled:
        return actions
    if policy.action == TERMINATE_AND_REPLACE:
        for worker in stalled:
            if not state.spares:
                break
            spare_cfg = state.spares.pop(0)
            worker.terminated = True
            state.retired[worker.name] = worker
            replacement = make_state(spare_cfg, state.config.rng_seed)
            replacement.stats.last_new_coverage_tick = tick
            for seed in state.pool.seeds():
                replacement.receive(seed)
            del state.workers[worker.name]
            state.workers[spare_cfg.name] = replacement
            state.log(tick, worker.name, "replaced_by_" + spare_cfg.name, 0, 0)
            actions.append(f"replaced {worker.name} with {spare_cfg.name}")
    else:  # boost_slots
        live = state.live_workers()
        best = max(live, key=lambda w: (w.stats.seeds_contributed, w.name))
        boosted = False
        for worker in stalled:
            if worker is best:
                continue
            worker.energy = max(1, worker.energy // 2)
            state.log(tick, worker.name, "halved", 0, worker.energy)
            actions.append(f"halved {worker.name} to {worker.energy}")
            boosted = True
        if boosted:
            best.energy *= 2
            state.log(tick, best.name, "doubled", 0, best.energy)
            actions.append(f"doubled {best.name} to {best.energy}")
    return actions


@dataclass
class FinalReport:
    """End-of-run summary: global counters, per-fuzzer attribution, timeline."""

    global_paths: int
    global_branches: int
    unique_bugs: int
    per_fuzzer: dict[str, dict[str, int]]
    ticks: int
    wall_seconds: float
    config_echo: dict
    timeline: list[TimelinePoint]

    def as_dict(self) -> dict:
        return {
            "global": {
                "paths": self.global_paths,
                "branches": self.global_branches,
                "unique_bugs": self.unique_bugs,
            },
            "per_fuzzer": self.per_fuzzer,
            "ticks": self.ticks,
            "wall_seconds": round(self.wall_seconds, 6),
            "config": self.config_echo,
            "timeline": [
                {"tick": p.tick, "paths": p.paths, "branches": p.branches,
                 "unique_bugs": p.unique_bugs}
                for p in self.timeline
            ],
        }


def run_with_state(config: EnsembleConfig, target: TargetSpec) -> tuple[FinalReport, GlobalState]:
    """Drive the full simulation and return the report plus the audit state."""
    started = time.perf_counter()
    state = setup(config, target)
    # Round zero evaluates the initial seeds, so a zero-tick run still
    # reports the initial coverage.
    sync_round(state, target, 0, dispatch_enabled=config.seed_sync)
    for tick in range(1, config.run_budget + 1):
        state.tick = tick
        for worker in state.live_workers():
            fuzz_tick(worker, target, state, tick)
        if tick % config.sync_period == 0:
            sync_round(state, target, tick, dispatch_enabled=config.seed_sync)
            if config.reallocation is not None:
                reallocate(state, config.reallocation, tick)
        state.snapshot(tick)
    report = _final_report(state, target, config, time.perf_counter() - started)
    return report, state


def run(config: EnsembleConfig, target: TargetSpec) -> FinalReport:
    """Execute the configured ensemble against the target (simulation mode)."""
    report, _ = run_with_state(config, target)
    return report


def _final_report(
    state: GlobalState, target: TargetSpec, config: EnsembleConfig, wall: float
) -> FinalReport:
    per_fuzzer: dict[str, dict[str, int]] = {}
    all_workers = dict(state.retired)
    all_workers.update(state.workers)
    for name, worker in all_workers.items():
        own = [s for s in state.pool.seeds() if s.origin == name and s.id in state.seed_eval]
        paths = {state.seed_eval[s.id][0] for s in own} - {None}
        sites: set[int] = set()
        for s in own:
            sites.update(state.seed_eval[s.id][1])
        per_fuzzer[name] = {
            "execs": worker.stats.execs,
            "seeds_contributed": worker.stats.seeds_contributed,
            "paths": len(paths),
            "branches": len(sites),
        }
    echo = {
        "fuzzers": [f.name for f in config.fuzzers],
        "sync_period": config.sync_period,
        "run_budget": config.run_budget,
        "seed_sync": config.seed_sync,
        "rng_seed": config.rng_seed,
        "target": target.name,
    }
    return FinalReport(
        global_paths=len(state.path_ids),
        global_branches=len(state.branch_sites),
        unique_bugs=state.unique_bugs(),
        per_fuzzer=per_fuzzer,
        ticks=config.run_budget,
        wall_seconds=wall,
        config_echo=echo,
        timeline=list(state.timeline),
    )


def timeline_csv(timeline: list[TimelinePoint]) -> str:
    lines = ["tick,paths,branches,unique_bugs"]
    for p in timeline:
        lines.append(f"{p.tick},{p.paths},{p.branches},{p.unique_bugs}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Real mode: external fuzzer processes over the file-system protocol
# ---------------------------------------------------------------------------


def run_real(
    externals: list[ExternalFuzzerConfig],
    target: TargetSpec,
    workdir_root,
    initial_seeds: Optional[list[bytes]] = None,
    wall_budget_s: float = 10.0,
    sync_period_s: float = REAL_MODE_SYNC_PERIOD_S,
    poll_interval_s: float = 0.05,
) -> tuple[FinalReport, GlobalState]:
    """Ensemble external fuzzer processes through the workdir seed exchange.

    Each poll cycle relays seeds and crash sidecars from the workers'
    output directories into the pool; every ``sync_period_s`` the monitor
    evaluates unsynced seeds on the toy target and dispatches interesting
    ones by writing them into the workers' queue directories. One final round
    runs at shutdown so late arrivals are still evaluated.
    """
    if not externals:
        raise ValueError("real mode needs at least one external fuzzer")
    names = [cfg.name for cfg in externals]
    if len(set(names)) != len(names):
        raise ValueError("duplicate fuzzer names")
    for cfg in externals:
        cfg.validate()
    started = time.perf_counter()
    workdir = Workdir.create(workdir_root, names)
    state = GlobalState()
    contributed = {name: 0 for name in names}

    def submit(seed: Seed, record: Optional[CrashRecord] = None) -> bool:
        accepted = state.submit(seed, record)
        if accepted:
            fsproto.write_seed(workdir.global_pool, seed)
            if seed.origin in contributed:
                contributed[seed.origin] += 1
        return accepted

    for content in initial_seeds if initial_seeds else [b""]:
        seed = Seed.make(content, origin="initial", birth_tick=0, cause=CAUSE_INITIAL)
        if state.pool.push(seed):
            state.log(0, "monitor", "seed_init", seed.id, 0)
            fsproto.write_seed(workdir.global_pool, seed)
            for name in names:
                fsproto.write_seed(workdir.queue_dir(name), seed)

    def member_for(cfg: ExternalFuzzerConfig) -> _RoundMember:
        def deliver(seed: Seed, name: str = cfg.name) -> bool:
            queue_dir = workdir.queue_dir(name)
            if (queue_dir / fsproto.seed_filename(seed.content)).exists():
                return False
            fsproto.write_seed(queue_dir, seed)
            return True

        return _RoundMember(cfg.name, cfg.granularity, deliver)

    members = [member_for(cfg) for cfg in externals]
    adapters = [ExternalAdapter(cfg, workdir) for cfg in externals]
    cycle = 0
    try:
        for adapter in adapters:
            adapter.spawn()
        _round(state, target, 0, members, dispatch_enabled=True)
        last_sync = time.monotonic()
        deadline = time.monotonic() + wall_budget_s
        while time.monotonic() < deadline:
            cycle += 1
            state.tick = cycle
            for adapter in adapters:
                adapter.poll(submit, cycle)
            if time.monotonic() - last_sync >= sync_period_s:
                _round(state, target, cycle, members, dispatch_enabled=True)
                last_sync = time.monotonic()
            state.snapshot(cycle)
            time.sleep(poll_interval_s)
        cycle += 1
        state.tick = cycle
        for adapter in adapters:
            adapter.poll(submit, cycle)
        _round(state, target, cycle, members, dispatch_enabled=True)
        state.snapshot(cycle)
    finally:
        for adapter in adapters:
            adapter.stop()

    per_fuzzer: dict[str, dict[str, int]] = {}
    for name in names:
        own = [s for s in state.pool.seeds() if s.origin == name and s.id in state.seed_eval]
        paths = {state.seed_eval[s.id][0] for s in own} - {None}
        sites: set[int] = set()
        for s in own:
            sites.update(state.seed_eval[s.id][1])
        per_fuzzer[name] = {
            "execs": 0,  # external workers do not report execution counts
            "seeds_contributed": contributed[name],
            "paths": len(paths),
            "branches": len(sites),
        }
    echo = {
        "fuzzers": names,
        "mode": "real",
        "sync_period_s": sync_period_s,
        "wall_budget_s": wall_budget_s,
        "target": target.name,
    }
    report = FinalReport(
        global_paths=len(state.path_ids),
        global_branches=len(state.branch_sites),
        unique_bugs=state.unique_bugs(),
        per_fuzzer=per_fuzzer,
        ticks=cycle,
        wall_seconds=time.perf_counter() - started,
        config_echo=echo,
        timeline=list(state.timeline),
    )
    return report, state
