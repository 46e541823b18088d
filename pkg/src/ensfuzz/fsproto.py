"""File-system seed exchange: the standard interface for external fuzzers.

External fuzzer processes take seeds from the file system and write results
back to it. Seeds are content-addressed (16 lowercase hex digits of the
FNV-1a-64 content hash, ``.seed`` suffix) and written atomically via a
temp-file rename, so a concurrent reader never observes a torn seed. Crashes
arrive as a seed plus a ``.bt`` backtrace sidecar. One adapter per external
worker spawns the process, polls its output directory, submits findings to
the pool channel, and restarts it when it exits.

Directory layout under the work dir (protocol version 1):

    global_pool/            seeds the monitor has accepted
    fuzzers/<name>/queue/   seeds dispatched to <name>
    fuzzers/<name>/out/     seeds produced by <name>
    crashes/                <hash>.seed + <hash>.bt pairs
    status/                 proto_version, quarantine/
"""

from __future__ import annotations

import logging
import os
import re
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from ensfuzz.corpus import CAUSE_CRASH, CAUSE_NEW_COVERAGE, Seed
from ensfuzz.coverage import fnv1a_64
from ensfuzz.triage import Backtrace, CrashRecord, parse_backtrace

logger = logging.getLogger(__name__)

PROTO_VERSION = "1"
SEED_SUFFIX = ".seed"
BACKTRACE_SUFFIX = ".bt"
ENV_QUEUE_DIR = "ENF_QUEUE_DIR"
ENV_OUT_DIR = "ENF_OUT_DIR"
ENV_CRASH_DIR = "ENF_CRASH_DIR"

_NAME_RE = re.compile(r"^[a-z0-9_-]+$")
_SEED_NAME_RE = re.compile(r"^[0-9a-f]{16}\.seed$")

# Consecutive sub-minimum-uptime exits after which an external worker is
# declared a crash storm.
CRASH_STORM_EXITS = 10
MIN_UPTIME_S = 0.05


class ExternalCrashStorm(RuntimeError):
    """Raised when an external worker keeps exiting immediately after spawn."""


def seed_filename(content: bytes) -> str:
    return f"{fnv1a_64(content):016x}{SEED_SUFFIX}"


@dataclass
class Workdir:
    """The on-disk exchange area; created atomically at setup."""

    root: Path

    @classmethod
    def create(cls, root, fuzzer_names: list[str]) -> Workdir:
        root = Path(root)
        for name in fuzzer_names:
            if not _NAME_RE.match(name):
                raise ValueError(f"fuzzer name {name!r} not allowed in a workdir")
        wd = cls(root)
        for sub in (wd.global_pool, wd.crashes, wd.status, wd.quarantine):
            sub.mkdir(parents=True, exist_ok=True)
        for name in fuzzer_names:
            wd.queue_dir(name).mkdir(parents=True, exist_ok=True)
            wd.out_dir(name).mkdir(parents=True, exist_ok=True)
        (wd.status / "proto_version").write_text(PROTO_VERSION + "\n")
        return wd

    @property
    def global_pool(self) -> Path:
        return self.root / "global_pool"

    @property
    def crashes(self) -> Path:
        return self.root / "crashes"

    @property
    def status(self) -> Path:
        return self.root / "status"

    @property
    def quarantine(self) -> Path:
        return self.status / "quarantine"

    def queue_dir(self, name: str) -> Path:
        return self.root / "fuzzers" / name / "queue"

    def out_dir(self, name: str) -> Path:
        return self.root / "fuzzers" / name / "out"


def write_seed(directory, content) -> Path:
    """Atomically write a content-addressed seed file; idempotent.

    The bytes land in a dot-prefixed temp file first and are renamed into
    place, so no reader ever sees a partial seed.
    """
    directory = Path(directory)
    if isinstance(content, Seed):
        content = content.content
    final = directory / seed_filename(content)
    if final.exists():
        return final
    tmp = directory / f".{final.stem}.tmp"
    try:
        tmp.write_bytes(content)
        os.replace(tmp, final)
    except OSError as exc:
        raise OSError(f"writing seed {final}: {exc}") from exc
    return final


def _origin_from_dir(directory: Path) -> str:
    parts = directory.parts
    if len(parts) >= 3 and parts[-3] == "fuzzers":
        return parts[-2]
    return "initial"


def scan_new(
    directory,
    seen: set[str],
    origin: Optional[str] = None,
    quarantine_dir=None,
    birth_tick: int = 0,
    cause: str = CAUSE_NEW_COVERAGE,
) -> list[Seed]:
    """Collect unseen ``.seed`` files, verifying the content-hash filenames.

    Files whose name does not match their content hash are moved to the
    quarantine directory instead of being returned. Every visited filename
    enters ``seen``, so a persistent set never yields the same file twice.
    """
    directory = Path(directory)
    if origin is None:
        origin = _origin_from_dir(directory)
    seeds: list[Seed] = []
    if not directory.is_dir():
        return seeds
    for path in sorted(directory.iterdir()):
        name = path.name
        if name in seen or not _SEED_NAME_RE.match(name):
            continue
        try:
            content = path.read_bytes()
        except OSError as exc:
            logger.warning("unreadable seed file %s: %s", path, exc)
            continue
        seen.add(name)
        if seed_filename(content) != name:
            logger.warning("hash mismatch for %s, quarantining", path)
            _quarantine(path, quarantine_dir)
            continue
        try:
            seed = Seed.make(content, origin=origin, birth_tick=birth_tick, cause=cause)
        except ValueError as exc:
            logger.warning("rejecting seed %s: %s", path, exc)
            _quarantine(path, quarantine_dir)
            continue
        seeds.append(seed)
    return seeds


def _quarantine(path: Path, quarantine_dir) -> None:
    if quarantine_dir is None:
        return
    qdir = Path(quarantine_dir)
    qdir.mkdir(parents=True, exist_ok=True)
    os.replace(path, qdir / path.name)


@dataclass
class ExternalFuzzerConfig:
    """One external fuzzer process plugged in through the workdir protocol."""

    name: str
    command: list[str]
    poll_interval: float = 0.1
    granularity: str = "edge"

    def validate(self) -> None:
        if not _NAME_RE.match(self.name):
            raise ValueError(f"bad external fuzzer name {self.name!r}")
        if not self.command:
            raise ValueError(f"{self.name}: empty command")


SubmitFn = Callable[[Seed, Optional[CrashRecord]], bool]


@dataclass
class ExternalAdapter:
    """Supervises one external fuzzer process and relays its findings.

    The child gets the queue/out/crash directories through the ``ENF_*``
    environment variables. External seeds are trusted as interesting; the
    next sync round re-evaluates them against the global maps anyway.
    """

    config: ExternalFuzzerConfig
    workdir: Workdir
    process: Optional[subprocess.Popen] = None
    seen_out: set[str] = field(default_factory=set)
    seen_crashes: set[str] = field(default_factory=set)
    restarts: int = 0
    _spawned_at: float = 0.0
    _fast_exits: int = 0

    def spawn(self) -> None:
        cfg = self.config
        cfg.validate()
        env = dict(os.environ)
        env[ENV_QUEUE_DIR] = str(self.workdir.queue_dir(cfg.name))
        env[ENV_OUT_DIR] = str(self.workdir.out_dir(cfg.name))
        env[ENV_CRASH_DIR] = str(self.workdir.crashes)
        try:
            self.process = subprocess.Popen(
                cfg.command,
                env=env,
                stdout=subprocess.DEVNULL,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise OSError(f"spawning {cfg.name} ({cfg.command[0]}): {exc}") from exc
        self._spawned_at = time.monotonic()

    def poll(self, submit: SubmitFn, tick: int = 0) -> int:
        """One supervision cycle: relay new seeds and crashes, restart if dead."""
        submitted = 0
        for seed in scan_new(
            self.workdir.out_dir(self.config.name),
            self.seen_out,
            origin=self.config.name,
            quarantine_dir=self.workdir.quarantine,
            birth_tick=tick,
        ):
            if submit(seed, None):
                submitted += 1
        submitted += self._poll_crashes(submit, tick)
        self._check_process()
        return submitted

    def _poll_crashes(self, submit: SubmitFn, tick: int) -> int:
        submitted = 0
        for seed in scan_new(
            self.workdir.crashes,
            self.seen_crashes,
            origin=self.config.name,
            quarantine_dir=self.workdir.quarantine,
            birth_tick=tick,
            cause=CAUSE_CRASH,
        ):
            sidecar = self.workdir.crashes / f"{seed.id:016x}{BACKTRACE_SUFFIX}"
            backtrace = self._read_backtrace(sidecar)
            record = None
            if backtrace is not None:
                record = CrashRecord(seed.id, self.config.name, tick, backtrace)
            if submit(seed, record):
                submitted += 1
        return submitted

    @staticmethod
    def _read_backtrace(sidecar: Path) -> Optional[Backtrace]:
        if not sidecar.is_file():
            logger.warning("crash seed without %s sidecar", sidecar.name)
            return None
        try:
            return parse_backtrace(sidecar.read_text())
        except (OSError, ValueError) as exc:
            logger.warning("bad backtrace sidecar %s: %s", sidecar, exc)
            return None

    def _check_process(self) -> None:
        if self.process is None or self.process.poll() is None:
            return
        uptime = time.monotonic() - self._spawned_at
        self._fast_exits = self._fast_exits + 1 if uptime < MIN_UPTIME_S else 0
        if self._fast_exits >= CRASH_STORM_EXITS:
            raise ExternalCrashStorm(
                f"crash storm: {self.config.name} exited {self._fast_exits} times immediately"
            )
        self.restarts += 1
        logger.info("restarting external fuzzer %s (exit %s)", self.config.name, self.process.returncode)
        self.spawn()

    def stop(self) -> None:
        if self.process is None or self.process.poll() is not None:
            return
        self.process.terminate()
        try:
            self.process.wait(timeout=2)
        except subprocess.TimeoutExpired:
            self.process.kill()
            self.process.wait(timeout=2)
