"""Fuzzer diversity from per-application statistics, and ensemble ranking.

For each application a baseline fuzzer covers some number of paths; a
candidate fuzzer's relative deviation is (p - p_baseline) / p_baseline. The
diversity of the candidate is the variance of those deviations across
applications: a fuzzer that beats the baseline everywhere by the same margin
is not diverse, one that wins big somewhere and loses big elsewhere is.
Ensembles are ranked by the summed diversity of their members.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from itertools import combinations
from typing import Iterable, Optional, Sequence, TextIO, Union

DEFAULT_WEIGHTS = (1.0, 1.0, 2.0)  # paths, branches, bugs


@dataclass(frozen=True)
class AppStatRow:
    """One application's counts: the baseline fuzzer's and every candidate's."""

    app: str
    baseline: int
    values: dict[str, int]

    def deviation(self, fuzzer: str) -> float:
        if self.baseline <= 0:
            raise ValueError(f"{self.app}: zero baseline has no relative deviation")
        try:
            value = self.values[fuzzer]
        except KeyError:
            raise ValueError(f"unknown fuzzer {fuzzer!r}") from None
        return (value - self.baseline) / self.baseline


def _check_rows(rows: Sequence[AppStatRow]) -> None:
    if not rows:
        raise ValueError("no stat rows")


def relative_mean(rows: Sequence[AppStatRow], fuzzer: str) -> float:
    """Mean relative deviation of ``fuzzer`` from the baseline across apps."""
    _check_rows(rows)
    devs = [row.deviation(fuzzer) for row in rows]
    return sum(devs) / len(devs)


def diversity(rows: Sequence[AppStatRow], fuzzer: str) -> float:
    """Variance of the relative deviations: the per-fuzzer diversity measure."""
    _check_rows(rows)
    devs = [row.deviation(fuzzer) for row in rows]
    mean = sum(devs) / len(devs)
    return sum((d - mean) ** 2 for d in devs) / len(devs)


def fuzzer_names(rows: Sequence[AppStatRow]) -> list[str]:
    _check_rows(rows)
    return sorted(rows[0].values)


def combined_diversity(
    tables: dict[str, Sequence[AppStatRow]],
    fuzzer: str,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
) -> float:
    """Weighted sum of per-metric diversities (paths, branches, bugs order)."""
    order = ("paths", "branches", "bugs")
    total = 0.0
    for metric, weight in zip(order, weights):
        rows = tables.get(metric)
        if rows:
            total += weight * diversity(rows, fuzzer)
    return total


def rank_ensemble(
    rows: Sequence[AppStatRow],
    candidates: Optional[Iterable[Sequence[str]]] = None,
    k: Optional[int] = None,
) -> list[tuple[float, tuple[str, ...]]]:
    """Order candidate ensembles by summed member diversity, best first.

    Without an explicit candidate list, all size-``k`` subsets of the table's
    fuzzers are ranked (k=1 reproduces the single-fuzzer diversity order).
    Ties break lexicographically on the member names.
    """
    _check_rows(rows)
    names = fuzzer_names(rows)
    if candidates is None:
        size = k if k is not None else 1
        candidates = combinations(names, size)
    scores = {name: diversity(rows, name) for name in names}
    ranked = []
    for members in candidates:
        members = tuple(sorted(members))
        for member in members:
            if member not in scores:
                raise ValueError(f"unknown fuzzer {member!r}")
        ranked.append((sum(scores[m] for m in members), members))
    ranked.sort(key=lambda pair: (-pair[0], pair[1]))
    return ranked


def load_stats(source: Union[str, TextIO]) -> list[AppStatRow]:
    """Parse a stats CSV with header ``app,baseline,<fuzzer>,...``.

    Counts must be positive integers; problems are reported with their line
    number.
    """
    if isinstance(source, str):
        with open(source, newline="") as fh:
            return load_stats(fh)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty stats file") from None
    if len(header) < 3 or header[0] != "app" or header[1] != "baseline":
        raise ValueError("header must be app,baseline,<fuzzer>,...")
    names = header[2:]
    rows: list[AppStatRow] = []
    for lineno, record in enumerate(reader, start=2):
        if not record or all(not cell.strip() for cell in record):
            continue
        if len(record) != len(header):
            raise ValueError(f"line {lineno}: expected {len(header)} fields, got {len(record)}")
        try:
            baseline = int(record[1])
            values = {name: int(cell) for name, cell in zip(names, record[2:])}
        except ValueError:
            raise ValueError(f"line {lineno}: counts must be integers") from None
        if baseline <= 0:
            raise ValueError(f"line {lineno}: baseline must be positive")
        bad = [name for name, v in values.items() if v <= 0]
        if bad:
            raise ValueError(f"line {lineno}: nonpositive count for {bad[0]}")
        rows.append(AppStatRow(record[0], baseline, values))
    if not rows:
        raise ValueError("stats file has no data rows")
    return rows


def _load_fixture(name: str) -> list[AppStatRow]:
    text = resources.files("ensfuzz.data").joinpath(name).read_text()
    import io

    return load_stats(io.StringIO(text))


def singlemode_paths_table() -> list[AppStatRow]:
    """The shipped 24-application single-mode path-count fixture."""
    return _load_fixture("singlemode_paths.csv")


def singlemode_branches_table() -> list[AppStatRow]:
    """The shipped 24-application single-mode branch-count fixture."""
    return _load_fixture("singlemode_branches.csv")
