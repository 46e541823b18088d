"""Command-line surface: run configs, canned simulations, reports, triage.

Subcommands:

- ``run``        execute a TOML run config (simulation or real mode)
- ``simulate``   run a canned deterministic scenario on the built-in target
- ``diversity``  compute per-fuzzer diversity and rank ensembles from CSVs
- ``triage``     deduplicate a directory of ``.bt`` backtrace files
- ``report``     render a timeline CSV as text, markdown, or JSON

Exit codes: 0 success, 2 configuration error, 3 runtime error. Set ``ENF_LOG``
to a level name (debug, info, warning, ...) to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from ensfuzz import diversity as diversity_mod
from ensfuzz import monitor, target as target_mod, triage
from ensfuzz.basefuzzer import FuzzerConfig
from ensfuzz.coverage import fnv1a_64
from ensfuzz.fsproto import ExternalFuzzerConfig
from ensfuzz.monitor import EnsembleConfig, ReallocationPolicy

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

PRESETS = ("solo1", "solo2", "ensemble_nosync", "ensemble_sync")
PRESET_BUDGET = 5000
PRESET_SYNC_PERIOD = 20


class ConfigError(Exception):
    """A problem in user-supplied configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# Run config parsing
# ---------------------------------------------------------------------------

_ENSEMBLE_KEYS = {"sync_period", "run_budget", "mode", "rng_seed", "seed_sync", "initial_seeds"}
_FUZZER_KEYS = {
    "name", "selection", "mutation", "granularity", "dictionary",
    "halts_on_crash", "rng_seed", "mutations_per_seed", "spare",
    "command", "poll_interval",
}
_TARGET_KEYS = {"builtin", "spec_file"}
_REALLOC_KEYS = {"stall_window", "action"}
_WORKDIR_KEYS = {"root", "poll_interval", "wall_budget"}
_TOP_KEYS = {"ensemble", "fuzzer", "target", "reallocation", "workdir"}


def _check_keys(section: str, table: dict, allowed: set[str]) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys: {', '.join(unknown)}")


def _parse_fuzzer(table: dict, index: int) -> FuzzerConfig:
    _check_keys(f"fuzzer #{index}", table, _FUZZER_KEYS)
    if "name" not in table:
        raise ConfigError(f"fuzzer #{index} needs a name")
    dictionary = table.get("dictionary")
    if dictionary is not None:
        dictionary = [tok.encode() for tok in dictionary]
    cfg = FuzzerConfig(
        name=table["name"],
        selection=table.get("selection", "round_robin"),
        mutation=table.get("mutation", "havoc"),
        granularity=table.get("granularity", "edge"),
        generation_dictionary=dictionary,
        halts_on_crash=table.get("halts_on_crash", False),
        rng_seed=table.get("rng_seed"),
        mutations_per_seed=table.get("mutations_per_seed", 8),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_run_config(path: str) -> dict:
    """Parse and validate a TOML run config; unknown keys are errors."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    _check_keys("top level", data, _TOP_KEYS)
    ensemble = data.get("ensemble", {})
    _check_keys("ensemble", ensemble, _ENSEMBLE_KEYS)
    tgt = data.get("target", {})
    _check_keys("target", tgt, _TARGET_KEYS)
    mode = ensemble.get("mode", "sim")
    if mode not in ("sim", "real"):
        raise ConfigError(f"unknown mode {mode!r} (expected sim or real)")

    fuzzer_tables = data.get("fuzzer", [])
    if not isinstance(fuzzer_tables, list):
        raise ConfigError("[[fuzzer]] must be an array of tables")
    if not fuzzer_tables:
        raise ConfigError("config defines no fuzzers")

    parsed: dict = {"mode": mode, "target": _load_target(tgt)}
    initial = [s.encode() for s in ensemble.get("initial_seeds", [])]

    if mode == "sim":
        fuzzers, spares = [], []
        for i, table in enumerate(fuzzer_tables, start=1):
            cfg = _parse_fuzzer(table, i)
            (spares if table.get("spare", False) else fuzzers).append(cfg)
        realloc = None
        if "reallocation" in data:
            _check_keys("reallocation", data["reallocation"], _REALLOC_KEYS)
            realloc = ReallocationPolicy(
                stall_window=data["reallocation"].get("stall_window", 100),
                action=data["reallocation"].get("action", monitor.TERMINATE_AND_REPLACE),
            )
        config = EnsembleConfig(
            fuzzers=fuzzers,
            initial_seeds=initial,
            sync_period=ensemble.get("sync_period", monitor.DEFAULT_SYNC_PERIOD),
            run_budget=ensemble.get("run_budget", 400),
            seed_sync=ensemble.get("seed_sync", True),
            rng_seed=ensemble.get("rng_seed", 0),
            reallocation=realloc,
            spares=spares,
        )
        try:
            config.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        parsed["config"] = config
    else:
        if "workdir" not in data:
            raise ConfigError("real mode needs a [workdir] section")
        _check_keys("workdir", data["workdir"], _WORKDIR_KEYS)
        if "root" not in data["workdir"]:
            raise ConfigError("[workdir] needs a root path")
        externals = []
        for i, table in enumerate(fuzzer_tables, start=1):
            _check_keys(f"fuzzer #{i}", table, _FUZZER_KEYS)
            if "command" not in table:
                raise ConfigError(f"fuzzer #{i}: real mode fuzzers need a command")
            externals.append(
                ExternalFuzzerConfig(
                    name=table["name"],
                    command=table["command"],
                    poll_interval=table.get("poll_interval", 0.1),
                    granularity=table.get("granularity", "edge"),
                )
            )
        parsed.update(
            externals=externals,
            initial_seeds=initial,
            workdir_root=data["workdir"]["root"],
            wall_budget=float(data["workdir"].get("wall_budget", 10.0)),
            poll_interval=float(data["workdir"].get("poll_interval", 0.05)),
            sync_period_s=float(ensemble.get("sync_period", monitor.REAL_MODE_SYNC_PERIOD_S)),
        )
    return parsed


def _load_target(table: dict) -> target_mod.TargetSpec:
    if "builtin" in table:
        name = table["builtin"]
        if name != "motivating":
            raise ConfigError(f"unknown builtin target {name!r}")
        return target_mod.builtin_motivating()
    if "spec_file" in table:
        try:
            text = Path(table["spec_file"]).read_text()
            return target_mod.parse_target_spec(text, name=Path(table["spec_file"]).stem)
        except OSError as exc:
            raise ConfigError(f"cannot read target spec: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"target spec: {exc}") from exc
    return target_mod.builtin_motivating()


# ---------------------------------------------------------------------------
# Canned deterministic scenarios (the built-in target's four famous rows)
# ---------------------------------------------------------------------------


def preset_config(name: str, ticks: int = PRESET_BUDGET) -> EnsembleConfig:
    """The four canned scenarios: two solvers alone, together, and synchronized."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")
    str_solver = FuzzerConfig(
        name="fuzzer1",
        selection="round_robin",
        mutation="dictionary_splice",
        granularity="edge",
        generation_dictionary=[b"Magic Str"],
        rng_seed=1001,
    )
    num_solver = FuzzerConfig(
        name="fuzzer2",
        selection="round_robin",
        mutation="dictionary_splice",
        granularity="block",
        generation_dictionary=[b"Magic Num"],
        rng_seed=2002,
    )
    fuzzers = {
        "solo1": [str_solver],
        "solo2": [num_solver],
        "ensemble_nosync": [str_solver, num_solver],
        "ensemble_sync": [str_solver, num_solver],
    }[name]
    return EnsembleConfig(
        fuzzers=fuzzers,
        initial_seeds=[],
        sync_period=PRESET_SYNC_PERIOD,
        run_budget=ticks,
        seed_sync=(name != "ensemble_nosync"),
        rng_seed=7,
    )


def simulate_preset(name: str, ticks: int = PRESET_BUDGET) -> monitor.FinalReport:
    return monitor.run(preset_config(name, ticks), target_mod.builtin_motivating())


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------


def parse_timeline_csv(text: str) -> list[tuple[int, int, int, int]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ConfigError("timeline is empty")
    if lines[0] != "tick,paths,branches,unique_bugs":
        raise ConfigError("timeline header must be tick,paths,branches,unique_bugs")
    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != 4:
            raise ConfigError(f"timeline line {lineno}: expected 4 fields")
        try:
            rows.append(tuple(int(p) for p in parts))
        except ValueError:
            raise ConfigError(f"timeline line {lineno}: values must be integers") from None
    return rows


def render_timeline(rows: list[tuple[int, int, int, int]], fmt: str) -> str:
    """Render the coverage-over-time table; re-rendering is byte-identical."""
    if fmt == "json":
        return json.dumps(
            [
                {"tick": t, "paths": p, "branches": b, "unique_bugs": u}
                for t, p, b, u in rows
            ],
            indent=2,
        ) + "\n"
    header = ("tick", "paths", "branches", "unique_bugs")
    widths = [
        max(len(header[i]), *(len(str(r[i])) for r in rows)) for i in range(4)
    ]
    if fmt == "markdown":
        head = "| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |"
        sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        body = [
            "| " + " | ".join(str(v).rjust(w) for v, w in zip(r, widths)) + " |"
            for r in rows
        ]
        return "\n".join([head, sep] + body) + "\n"
    if fmt == "text":
        head = "  ".join(h.rjust(w) for h, w in zip(header, widths))
        body = ["  ".join(str(v).rjust(w) for v, w in zip(r, widths)) for r in rows]
        return "\n".join([head] + body) + "\n"
    raise ConfigError(f"unknown format {fmt!r}")


def timeline_warnings(rows: list[tuple[int, int, int, int]]) -> list[str]:
    warnings = []
    for i in range(1, len(rows)):
        for col, label in ((1, "paths"), (2, "branches"), (3, "unique_bugs")):
            if rows[i][col] < rows[i - 1][col]:
                warnings.append(
                    f"{label} decreases at tick {rows[i][0]} "
                    f"({rows[i - 1][col]} -> {rows[i][col]})"
                )
    return warnings


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _emit_report(report: monitor.FinalReport, args) -> None:
    payload = json.dumps(report.as_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(payload)
    else:
        sys.stdout.write(payload)
    if getattr(args, "timeline", None):
        Path(args.timeline).write_text(monitor.timeline_csv(report.timeline))


def _cmd_run(args) -> int:
    parsed = load_run_config(args.config)
    if parsed["mode"] == "sim":
        config: EnsembleConfig = parsed["config"]
        if args.ticks is not None:
            config.run_budget = args.ticks
        report = monitor.run(config, parsed["target"])
    else:
        report, _ = monitor.run_real(
            parsed["externals"],
            parsed["target"],
            parsed["workdir_root"],
            initial_seeds=parsed["initial_seeds"],
            wall_budget_s=parsed["wall_budget"],
            sync_period_s=parsed["sync_period_s"],
            poll_interval_s=parsed["poll_interval"],
        )
    _emit_report(report, args)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    report = simulate_preset(args.preset, args.ticks)
    _emit_report(report, args)
    return EXIT_OK


def _cmd_diversity(args) -> int:
    try:
        paths_rows = diversity_mod.load_stats(args.stats)
        tables = {"paths": paths_rows}
        if args.stats_branches:
            tables["branches"] = diversity_mod.load_stats(args.stats_branches)
        if args.stats_bugs:
            tables["bugs"] = diversity_mod.load_stats(args.stats_bugs)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    weights = diversity_mod.DEFAULT_WEIGHTS
    if args.weights:
        try:
            weights = tuple(float(w) for w in args.weights.split(","))
        except ValueError:
            raise ConfigError(f"bad weights {args.weights!r}") from None
        if len(weights) != 3:
            raise ConfigError("weights must be three comma-separated numbers")
    names = diversity_mod.fuzzer_names(paths_rows)
    if len(tables) == 1:
        scores = {name: diversity_mod.diversity(paths_rows, name) for name in names}
    else:
        scores = {
            name: diversity_mod.combined_diversity(tables, name, weights) for name in names
        }
    ranked = diversity_mod.rank_ensemble(paths_rows, k=args.rank)
    payload = {
        "diversity": {k: round(v, 6) for k, v in sorted(scores.items())},
        "ranked_ensembles": [
            {"members": list(members), "score": round(score, 6)} for score, members in ranked
        ],
    }
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def _cmd_triage(args) -> int:
    directory = Path(args.input)
    if not directory.is_dir():
        raise ConfigError(f"{directory} is not a directory")
    crashes = []
    files = {}
    for index, path in enumerate(sorted(directory.glob("*.bt"))):
        try:
            bt = triage.parse_backtrace(path.read_text())
        except ValueError as exc:
            logger.warning("skipping %s: %s", path.name, exc)
            continue
        record = triage.CrashRecord(
            seed_id=fnv1a_64(path.stem.encode()), fuzzer="external", tick=index, backtrace=bt
        )
        crashes.append(record)
        files[record.seed_id] = path.name
    bugs = triage.dedup(crashes)
    payload = [
        {
            "bug_key": {
                "function": bug.bug_key[0],
                "file": bug.bug_key[1],
                "line": bug.bug_key[2],
            },
            "occurrences": bug.occurrences,
            "exemplar_file": files[bug.exemplar.seed_id],
        }
        for bug in bugs
    ]
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        text = Path(args.timeline).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read timeline: {exc}") from exc
    rows = parse_timeline_csv(text)
    for warning in timeline_warnings(rows):
        print(f"warning: {warning}", file=sys.stderr)
    sys.stdout.write(render_timeline(rows, args.format))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ensfuzz", description="ensemble fuzzing orchestrator and toolbox"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a TOML run config")
    p_run.add_argument("config", help="path to the run config file")
    p_run.add_argument("--out", help="write the JSON report here instead of stdout")
    p_run.add_argument("--timeline", help="write the timeline CSV here")
    p_run.add_argument("--ticks", type=int, help="override the tick budget")
    p_run.set_defaults(func=_cmd_run)

    p_sim = sub.add_parser("simulate", help="run a canned deterministic scenario")
    p_sim.add_argument("preset", choices=PRESETS)
    p_sim.add_argument("--ticks", type=int, default=PRESET_BUDGET)
    p_sim.add_argument("--out", help="write the JSON report here instead of stdout")
    p_sim.add_argument("--timeline", help="write the timeline CSV here")
    p_sim.set_defaults(func=_cmd_simulate)

    p_div = sub.add_parser("diversity", help="diversity metrics from stats CSVs")
    p_div.add_argument("--stats", required=True, help="paths stats CSV")
    p_div.add_argument("--stats-branches", help="branch stats CSV")
    p_div.add_argument("--stats-bugs", help="bug stats CSV")
    p_div.add_argument("--weights", help="paths,branches,bugs weights (default 1,1,2)")
    p_div.add_argument("--rank", type=int, default=1, help="ensemble size to rank")
    p_div.set_defaults(func=_cmd_diversity)

    p_tri = sub.add_parser("triage", help="deduplicate a directory of .bt files")
    p_tri.add_argument("input", help="directory containing .bt backtrace files")
    p_tri.set_defaults(func=_cmd_triage)

    p_rep = sub.add_parser("report", help="render a timeline CSV")
    p_rep.add_argument("timeline", help="timeline CSV path")
    p_rep.add_argument("--format", choices=("text", "markdown", "json"), default="text")
    p_rep.set_defaults(func=_cmd_report)
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("ENF_LOG", "warning").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to a distinct exit code
        logger.debug("runtime error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
