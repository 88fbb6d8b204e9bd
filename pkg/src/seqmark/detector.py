"""Owner-side attribution of a leaked copy to the service providers that received it."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from .core import Sequence, SharingLedger

COMBINATION_LIMIT = 10**7


@dataclass(frozen=True)
class LeakPattern:
    """Leaked (position, state) pairs that differ from the original, plus the positions seen."""

    entries: frozenset[tuple[int, int]]
    covered_indices: frozenset[int]

    def __post_init__(self):
        stray = {i for i, _ in self.entries} - self.covered_indices
        if stray:
            raise ValueError(f"entry at {min(stray)} lies outside the covered indices")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class DetectionReport:
    suspects: set[str]
    scores: dict = field(default_factory=dict)
    entropy_bits: float | None = None
    precision: float | None = None
    recall: float | None = None
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "suspects": sorted(self.suspects),
            "scores": {(k if isinstance(k, str) else "+".join(k)): v for k, v in self.scores.items()},
            "entropy_bits": self.entropy_bits,
            "precision": self.precision,
            "recall": self.recall,
            "flags": list(self.flags),
        }


def _as_mapping(leaked, covered) -> dict[int, int]:
    if isinstance(leaked, dict):
        return {int(k): int(v) for k, v in leaked.items()}
    pts = leaked.points if isinstance(leaked, Sequence) else tuple(leaked)
    if covered is not None and len(pts) == len(covered) and len(pts) != 0 and not isinstance(leaked, Sequence):
        return {int(i): int(v) for i, v in zip(sorted(covered), pts)}
    return {i: int(v) for i, v in enumerate(pts)}


def extract_leak_pattern(leaked, original: Sequence, covered_indices=None) -> LeakPattern:
    """Positions of the leak whose state differs from the owner's original.

    ``leaked`` is a full-length sequence, a ``{position: state}`` mapping, or
    a list of values aligned with the sorted ``covered_indices``.
    """
    values = _as_mapping(leaked, covered_indices)
    covered = frozenset(int(i) for i in (covered_indices if covered_indices is not None else values))
    entries = set()
    for i in covered:
        if not 0 <= i < len(original):
            raise ValueError(f"index {i} outside original of length {len(original)}")
        if i not in values:
            raise ValueError(f"leak has no value at covered index {i}")
        if values[i] != original[i]:
            entries.add((i, values[i]))
    return LeakPattern(frozenset(entries), covered)


def precision_recall(suspects, truth, all_sps=None) -> tuple[float, float, list[str]]:
    """Precision and recall of a suspect set; empty-set conventions are flagged."""
    suspects, truth = set(suspects), set(truth)
    if all_sps is not None and not (suspects | truth) <= set(all_sps):
        raise ValueError("suspects and truth must be drawn from the known SPs")
    flags = []
    hit = len(suspects & truth)
    if suspects:
        rho = hit / len(suspects)
    else:
        rho = 1.0 if not truth else 0.0
        if truth:
            flags.append("empty suspect set")
    if truth:
        eps = hit / len(truth)
    else:
        eps = 1.0
        flags.append("recall undefined without malicious SPs")
    return rho, eps, flags


def _finish(report: DetectionReport, truth, ledger: SharingLedger) -> DetectionReport:
    if truth is not None:
        rho, eps, flags = precision_recall(report.suspects, truth, ledger.sp_ids)
        report.precision, report.recall = rho, eps
        report.flags.extend(flags)
    return report


def match_scores(zalpha: LeakPattern, ledger: SharingLedger) -> dict[str, int]:
    """``g_i = |Z_alpha ∩ Z_i|`` matching position and watermarked state."""
    return {s.sp_id: len(zalpha.entries & s.pattern.marks()) for s in ledger.sharings}


def detect_single(zalpha: LeakPattern, ledger: SharingLedger, truth=None) -> DetectionReport:
    """Blame the SP whose pattern shares the most (position, state) pairs with the leak."""
    if ledger.h == 0:
        raise ValueError("ledger has no sharings")
    g = match_scores(zalpha, ledger)
    best = max(g.values())
    suspect = min(sp for sp, v in g.items() if v == best)
    report = DetectionReport({suspect}, dict(g))
    if best == 0:
        report.flags.append("no watermark evidence")
    return _finish(report, truth, ledger)


def detect_combination(zalpha: LeakPattern, ledger: SharingLedger, phi_hat: int, truth=None) -> DetectionReport:
    """Best-scoring group of ``phi_hat`` SPs whose patterns jointly cover the leak.

    If no group covers the leak (noise outside every pattern) all groups are
    scored.
    """
    h = ledger.h
    if not 1 <= phi_hat <= h:
        raise ValueError(f"phi_hat={phi_hat} outside [1, {h}]")
    if math.comb(h, phi_hat) > COMBINATION_LIMIT:
        raise ValueError(f"C({h}, {phi_hat}) combinations exceed the limit")
    ids = sorted(ledger.sp_ids)
    g = match_scores(zalpha, ledger)
    marks = {sp: ledger.sharing(sp).pattern.marks() for sp in ids}
    # bitmask of SPs whose pattern holds each leaked entry
    holders = set()
    for e in zalpha.entries:
        mask = 0
        for b, sp in enumerate(ids):
            if e in marks[sp]:
                mask |= 1 << b
        holders.add(mask)
    combos = list(itertools.combinations(range(len(ids)), phi_hat))
    scored = []
    for combo in combos:
        cmask = 0
        for b in combo:
            cmask |= 1 << b
        covers = all(m & cmask for m in holders)
        scored.append((combo, covers, sum(g[ids[b]] for b in combo)))
    survivors = [s for s in scored if s[1]]
    report_flags = []
    if not survivors:
        survivors = scored
        report_flags.append("no combination covers the leak; elimination skipped")
    best = max(s[2] for s in survivors)
    chosen = min(s[0] for s in survivors if s[2] == best)
    scores = {tuple(ids[b] for b in s[0]): s[2] for s in survivors}
    report = DetectionReport({ids[b] for b in chosen}, scores, flags=report_flags)
    if best == 0:
        report.flags.append("no watermark evidence")
    return _finish(report, truth, ledger)


def partial_leak_candidates(leak: dict[int, int], ledger: SharingLedger, truth=None) -> DetectionReport:
    """SPs whose released copy agrees with the leak on every covered position.

    The source is taken as uniform over the candidates; entropy in bits.
    """
    if ledger.h == 0:
        raise ValueError("ledger has no sharings")
    leak = {int(k): int(v) for k, v in leak.items()}
    base = ledger.base
    cands = []
    for s in ledger.sharings:
        wm = {i: b for i, _, b in s.pattern.entries}
        if all(wm.get(i, base[i]) == v for i, v in leak.items()):
            cands.append(s.sp_id)
    if cands:
        p = 1.0 / len(cands)
        entropy = -len(cands) * p * math.log2(p)
    else:
        entropy = 0.0
    report = DetectionReport(set(cands), {sp: 1.0 / len(cands) for sp in cands}, entropy_bits=entropy + 0.0)
    if not cands:
        report.flags.append("no consistent candidate")
    return _finish(report, truth, ledger)
