"""Coverage maps with hit-count bucketing, merging, and new-coverage detection.

A coverage map associates instrumentation site ids with an 8-bit bucket mask
(one bit per hit-count class, AFL style). Local fuzzers diff candidate
coverage against their own map to decide what is interesting; the global
monitor diffs against the ensemble-wide map to decide what to synchronize.
Maps only ever grow: merging never clears a bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF

EDGE = "edge"
BLOCK = "block"
KINDS = (EDGE, BLOCK)

# Upper bound (inclusive) of each hit-count bucket; >=128 falls into bucket 7.
_BUCKET_BOUNDS = (1, 2, 3, 7, 15, 31, 127)


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash, the content/trace hashing primitive of the package."""
    h = FNV_OFFSET_BASIS
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


def bucketize(hits: int) -> int:
    """Map a positive hit count to its bucket index in 0..7.

    Buckets: 1, 2, 3, 4-7, 8-15, 16-31, 32-127, >=128.
    """
    if hits == 1:  # the overwhelmingly common case on acyclic targets
        return 0
    if hits < 1:
        raise ValueError("no-hit has no bucket")
    for index, bound in enumerate(_BUCKET_BOUNDS):
        if hits <= bound:
            return index
    return 7


def path_id(trace: Iterable[int]) -> int:
    """Stable 64-bit id of an ordered site-id trace.

    FNV-1a over the little-endian 4-byte encoding of each site id in order;
    the empty trace hashes to the FNV offset basis.
    """
    h = FNV_OFFSET_BASIS
    for site in trace:
        for b in site.to_bytes(4, "little"):
            h = ((h ^ b) * FNV_PRIME) & _U64
    return h


@dataclass
class CoverageMap:
    """Bucketed hit map for one coverage granularity (``edge`` or ``block``).

    ``slots`` maps site id to a nonzero 8-bit bucket mask; absent sites carry
    no entry. Instances produced by an execution are treated as immutable
    values; use :func:`merge` to combine them.
    """

    kind: str
    slots: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown coverage kind {self.kind!r}")

    @classmethod
    def from_counts(cls, kind: str, counts: Mapping[int, int]) -> CoverageMap:
        """Build a map from per-site hit counts (zero counts are ignored)."""
        slots = {site: 1 << bucketize(n) for site, n in counts.items() if n > 0}
        return cls(kind, slots)

    @classmethod
    def empty(cls, kind: str) -> CoverageMap:
        return cls(kind, {})

    def is_empty(self) -> bool:
        return not self.slots

    def sites(self) -> set[int]:
        return set(self.slots)

    def bit_pairs(self) -> set[tuple[int, int]]:
        """All set (site, bucket) pairs; the map's canonical set form."""
        pairs = set()
        for site, mask in self.slots.items():
            for bucket in range(8):
                if mask & (1 << bucket):
                    pairs.add((site, bucket))
        return pairs

    def copy(self) -> CoverageMap:
        return CoverageMap(self.kind, dict(self.slots))

    def to_text(self) -> str:
        """Canonical text form: kind header then ``site-hex:mask-hex`` lines sorted by site."""
        lines = [f"kind:{self.kind}"]
        for site in sorted(self.slots):
            lines.append(f"{site:08x}:{self.slots[site]:02x}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> CoverageMap:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("kind:"):
            raise ValueError("coverage text must start with a kind: header")
        kind = lines[0][len("kind:"):]
        slots: dict[int, int] = {}
        for ln in lines[1:]:
            site_hex, _, mask_hex = ln.partition(":")
            try:
                site, mask = int(site_hex, 16), int(mask_hex, 16)
            except ValueError as exc:
                raise ValueError(f"bad coverage line {ln!r}") from exc
            if not 0 < mask <= 0xFF:
                raise ValueError(f"bad bucket mask in line {ln!r}")
            slots[site] = mask
        return cls(kind, slots)


def _require_same_kind(a: CoverageMap, b: CoverageMap) -> None:
    if a.kind != b.kind:
        raise ValueError(f"granularity mismatch: {a.kind} vs {b.kind}")


def new_bits(global_map: CoverageMap, cover: CoverageMap) -> dict[int, int]:
    """Bits of ``cover`` absent from ``global_map``, as site -> mask of new bits."""
    _require_same_kind(global_map, cover)
    fresh: dict[int, int] = {}
    gslots = global_map.slots
    for site, mask in cover.slots.items():
        extra = mask & ~gslots.get(site, 0)
        if extra:
            fresh[site] = extra
    return fresh


def merge(global_map: CoverageMap, local: CoverageMap) -> tuple[CoverageMap, dict[int, int]]:
    """Union two maps of the same kind.

    Returns ``(merged, new)`` where ``new`` holds exactly the (site, bucket)
    bits present in ``local`` and absent in ``global_map`` before the merge.
    Neither input is mutated.
    """
    fresh = new_bits(global_map, local)
    merged = dict(global_map.slots)
    for site, mask in local.slots.items():
        merged[site] = merged.get(site, 0) | mask
    return CoverageMap(global_map.kind, merged), fresh


def merge_in_place(accumulator: CoverageMap, cover: CoverageMap) -> dict[int, int]:
    """Fold ``cover`` into an accumulator map the caller owns; returns the new bits.

    Same growth semantics as :func:`merge` without copying the accumulator;
    only valid on a map that is not shared as an immutable value.
    """
    _require_same_kind(accumulator, cover)
    fresh: dict[int, int] = {}
    slots = accumulator.slots
    for site, mask in cover.slots.items():
        have = slots.get(site, 0)
        extra = mask & ~have
        if extra:
            fresh[site] = extra
            slots[site] = have | mask
    return fresh


def is_new_coverage(global_map: CoverageMap, cover: CoverageMap) -> bool:
    """True iff merging ``cover`` into ``global_map`` would set at least one new bit."""
    return bool(new_bits(global_map, cover))
