"""Sequences, watermark patterns and the owner's sharing ledger."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence as Seq

import numpy as np


class LedgerError(ValueError):
    """Raised when a sharing cannot be recorded consistently."""


@dataclass(frozen=True)
class Sequence:
    """Ordered discrete-state data points of one owner.

    ``points`` holds integers in ``0..m-1``; the tuple is never mutated.
    """

    points: tuple[int, ...]
    m: int = 2

    def __post_init__(self):
        arr = np.asarray(self.points, dtype=np.int64).ravel()
        if arr.size == 0:
            raise ValueError("sequence must contain at least one point")
        if self.m < 2:
            raise ValueError(f"state space size must be >= 2, got {self.m}")
        bad = np.flatnonzero((arr < 0) | (arr >= self.m))
        if bad.size:
            i = int(bad[0])
            raise ValueError(f"point {i} has state {arr[i]}, outside [0, {self.m - 1}]")
        object.__setattr__(self, "points", tuple(arr.tolist()))

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i):
        return self.points[i]

    def to_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.int64)

    @classmethod
    def from_array(cls, arr, m: int) -> "Sequence":
        return cls(tuple(int(v) for v in np.asarray(arr).ravel()), m)

    def with_changes(self, changes: dict[int, int]) -> "Sequence":
        arr = self.to_array()
        if changes:
            arr[list(changes)] = list(changes.values())
        return Sequence(arr, self.m)


@dataclass(frozen=True)
class WatermarkPattern:
    """Positions changed for one recipient: ``(index, from, to)`` entries."""

    sp_id: str
    entries: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        ents = tuple(sorted((int(i), int(a), int(b)) for i, a, b in self.entries))
        seen = set()
        for i, a, b in ents:
            if i in seen:
                raise ValueError(f"duplicate index {i} in pattern for {self.sp_id!r}")
            if a == b:
                raise ValueError(f"entry at index {i} does not change the state")
            seen.add(i)
        object.__setattr__(self, "entries", ents)

    @property
    def w(self) -> int:
        return len(self.entries)

    @property
    def indices(self) -> frozenset[int]:
        return frozenset(i for i, _, _ in self.entries)

    def marks(self) -> frozenset[tuple[int, int]]:
        """(position, watermarked state) pairs."""
        return frozenset((i, b) for i, _, b in self.entries)

    def apply(self, seq: Sequence) -> Sequence:
        for i, a, _ in self.entries:
            if seq[i] != a:
                raise ValueError(f"pattern expects state {a} at {i}, found {seq[i]}")
        return seq.with_changes({i: b for i, _, b in self.entries})


@dataclass(frozen=True)
class CountHistogram:
    """``n[i]`` is the number of points watermarked exactly ``i`` times in ``h`` sharings."""

    n: tuple[int, ...]

    def __post_init__(self):
        n = tuple(int(v) for v in self.n)
        if not n:
            raise ValueError("histogram needs at least one bucket")
        if any(v < 0 for v in n):
            raise ValueError(f"negative bucket count in {n}")
        object.__setattr__(self, "n", n)

    @property
    def h(self) -> int:
        return len(self.n) - 1

    @property
    def length(self) -> int:
        return sum(self.n)

    def __getitem__(self, i: int) -> int:
        return self.n[i]

    @classmethod
    def initial(cls, length: int) -> "CountHistogram":
        return cls((length,))


@dataclass(frozen=True)
class Sharing:
    sp_id: str
    indices: frozenset[int]
    pattern: WatermarkPattern


@dataclass
class SharingLedger:
    """Append-only history of an owner's sharings.

    Single writer; ``per_point_counts`` always spans the full index range.
    """

    base: Sequence
    sharings: list[Sharing] = field(default_factory=list)
    per_point_counts: np.ndarray = None

    def __post_init__(self):
        if self.per_point_counts is None:
            self.per_point_counts = np.zeros(len(self.base), dtype=np.int64)
            for s in self.sharings:
                self.per_point_counts[list(s.pattern.indices)] += 1

    @property
    def length(self) -> int:
        return len(self.base)

    @property
    def h(self) -> int:
        return len(self.sharings)

    @property
    def sp_ids(self) -> list[str]:
        return [s.sp_id for s in self.sharings]

    def sharing(self, sp_id: str) -> Sharing:
        for s in self.sharings:
            if s.sp_id == sp_id:
                return s
        raise KeyError(sp_id)

    def released(self, sp_id: str) -> Sequence:
        """The watermarked copy that was sent to ``sp_id`` (full length, unshared points original)."""
        return self.sharing(sp_id).pattern.apply(self.base)

    def counts(self) -> CountHistogram:
        return counts(self)

    def to_json(self) -> dict:
        return {
            "length": self.length,
            "m": self.base.m,
            "base": list(self.base.points),
            "sharings": [
                {
                    "sp_id": s.sp_id,
                    "indices": sorted(s.indices),
                    "pattern": [{"index": i, "from": a, "to": b} for i, a, b in s.pattern.entries],
                }
                for s in self.sharings
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SharingLedger":
        base = Sequence(tuple(doc["base"]), int(doc["m"]))
        if len(base) != int(doc["length"]):
            raise LedgerError(f"ledger length {doc['length']} does not match base of length {len(base)}")
        ledger = cls(base)
        for s in doc["sharings"]:
            pattern = WatermarkPattern(s["sp_id"], [(e["index"], e["from"], e["to"]) for e in s["pattern"]])
            record_sharing(ledger, s["sp_id"], s["indices"], pattern)
        return ledger

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "SharingLedger":
        return cls.from_json(json.loads(Path(path).read_text()))


def counts(ledger: SharingLedger) -> CountHistogram:
    """Histogram of per-point watermark counts over ``ledger.h`` sharings."""
    n = np.bincount(ledger.per_point_counts, minlength=ledger.h + 1)
    return CountHistogram(tuple(int(v) for v in n[: ledger.h + 1]))


def utility(original: Sequence, released: Sequence) -> float:
    """Fraction of positions left unchanged."""
    if len(original) != len(released):
        raise ValueError(f"length mismatch: {len(original)} vs {len(released)}")
    a, b = original.to_array(), released.to_array()
    return 1.0 - np.count_nonzero(a != b) / len(a)


def record_sharing(ledger: SharingLedger, sp_id: str, index_set: Iterable[int],
                   pattern: WatermarkPattern) -> SharingLedger:
    """Append a sharing and bump the counts of its watermarked positions."""
    indices = frozenset(int(i) for i in index_set)
    if any(s.sp_id == sp_id for s in ledger.sharings):
        raise LedgerError(f"sp_id {sp_id!r} already has a sharing")
    length = ledger.length
    bad = [i for i in indices if not 0 <= i < length]
    if bad:
        raise LedgerError(f"index {min(bad)} out of range for length {ledger.length}")
    outside = pattern.indices - indices
    if outside:
        raise LedgerError(f"pattern index {min(outside)} is not in the shared index set")
    for i, a, _ in pattern.entries:
        if ledger.base[i] != a:
            raise LedgerError(f"pattern 'from' state {a} at {i} differs from original {ledger.base[i]}")
    ledger.sharings.append(Sharing(sp_id, indices, pattern))
    if pattern.entries:
        ledger.per_point_counts[list(pattern.indices)] += 1
    return ledger


def hamming(a: Seq[int], b: Seq[int]) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))
