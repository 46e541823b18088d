"""Shared reference implementations the tests use as independent oracles.

These deliberately re-derive the hashing and bit-set arithmetic from first
principles instead of calling into the package, so a test comparing against
them is a genuine cross-check.
"""

from __future__ import annotations


def reference_fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) % (1 << 64)
    return h


def reference_path_id(trace) -> int:
    blob = b"".join(int(site).to_bytes(4, "little") for site in trace)
    return reference_fnv1a_64(blob)


def map_to_bit_pairs(slots: dict[int, int]) -> set[tuple[int, int]]:
    """Model a coverage map as its set of (site, bucket) pairs."""
    pairs = set()
    for site, mask in slots.items():
        for bucket in range(8):
            if mask & (1 << bucket):
                pairs.add((site, bucket))
    return pairs


def bit_pairs_to_slots(pairs: set[tuple[int, int]]) -> dict[int, int]:
    slots: dict[int, int] = {}
    for site, bucket in pairs:
        slots[site] = slots.get(site, 0) | (1 << bucket)
    return slots
