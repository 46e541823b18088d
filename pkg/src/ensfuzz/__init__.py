"""Ensemble fuzzing orchestrator with seed synchronization among diverse base fuzzers.

The package runs several simulated base fuzzers against one deterministic toy
target, shares interesting seeds between them through a globally-asynchronous /
locally-synchronous monitor, merges coverage into global maps, triages crashes
into unique bugs, and quantifies fuzzer diversity from per-application
statistics. A file-system protocol lets external fuzzer processes join the
ensemble through the same seed exchange.
"""

from ensfuzz.corpus import GlobalSeedPool, LocalQueue, Seed
from ensfuzz.coverage import CoverageMap, bucketize, fnv1a_64, is_new_coverage, merge, path_id
from ensfuzz.monitor import EnsembleConfig, FinalReport, GlobalState, run, setup, sync_round
from ensfuzz.target import ExecResult, TargetSpec, builtin_motivating, enumerate_target, execute
from ensfuzz.triage import Backtrace, CrashRecord, Frame, dedup, parse_backtrace

__version__ = "0.1.0"

__all__ = [
    "Backtrace",
    "CoverageMap",
    "CrashRecord",
    "EnsembleConfig",
    "ExecResult",
    "FinalReport",
    "Frame",
    "GlobalSeedPool",
    "GlobalState",
    "LocalQueue",
    "Seed",
    "TargetSpec",
    "bucketize",
    "builtin_motivating",
    "dedup",
    "enumerate_target",
    "execute",
    "fnv1a_64",
    "is_new_coverage",
    "merge",
    "parse_backtrace",
    "path_id",
    "run",
    "setup",
    "sync_round",
]
