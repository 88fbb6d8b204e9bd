"""Watermark placement for a new sharing.

``embed_uncorrelated`` draws the allocated number of points uniformly from
each watermark-count bucket.  ``embed_correlated`` walks the buckets in
order of increasing presence probability, moves each point to its best
supported state and propagates the change through the pairwise
correlation model so that the released copy stays self-consistent.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .core import Sequence, SharingLedger, WatermarkPattern

TargetRule = Callable[[int, int], int]


class EmbeddingError(RuntimeError):
    pass


class InsufficientWatermarkablePoints(EmbeddingError):
    pass


def default_target(state: int, m: int) -> int:
    """Predetermined watermark state: flip for binary, 0->1, 1->2, 2->1 for SNPs."""
    return state + 1 if state < m - 1 else state - 1


@dataclass
class CorrelationModel:
    """Thresholded pairwise conditionals ``Pr(x_i = a | x_j = b) > tau``.

    ``entries`` maps ``(i, a, j, b)`` to the probability.  Lookup indices by
    target point and by source state are built on construction.
    """

    entries: dict[tuple[int, int, int, int], float] = field(default_factory=dict)
    tau: float = 0.9
    m: int = 3

    def __post_init__(self):
        by_target = defaultdict(list)
        by_source = defaultdict(list)
        for (i, a, j, b), p in self.entries.items():
            if not (p > self.tau and p <= 1.0):
                raise ValueError(f"entry {(i, a, j, b)} has p={p} outside ({self.tau}, 1]")
            if i == j:
                raise ValueError(f"self-correlation entry at {i}")
            by_target[i].append((a, j, b, p))
            by_source[(j, b)].append((i, a, p))
        self._by_target = {k: sorted(v, key=lambda e: (e[1], e[2], e[0])) for k, v in by_target.items()}
        self._by_source = {k: sorted(v) for k, v in by_source.items()}

    def __len__(self) -> int:
        return len(self.entries)

    def incoming(self, i: int) -> list[tuple[int, int, int, float]]:
        """Entries ``(a, j, b, p)`` whose target point is ``i``."""
        return self._by_target.get(i, [])

    def outgoing(self, j: int, b: int) -> list[tuple[int, int, float]]:
        """Entries ``(i, a, p)`` conditioned on ``x_j = b``."""
        return self._by_source.get((j, b), [])

    def to_json(self) -> list[dict]:
        return [{"i": i, "a": a, "j": j, "b": b, "p": p} for (i, a, j, b), p in sorted(self.entries.items())]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"tau": self.tau, "m": self.m, "entries": self.to_json()}))

    @classmethod
    def load(cls, path) -> "CorrelationModel":
        doc = json.loads(Path(path).read_text())
        if isinstance(doc, list):
            doc = {"entries": doc}
        entries = {(e["i"], e["a"], e["j"], e["b"]): float(e["p"]) for e in doc["entries"]}
        return cls(entries, tau=float(doc.get("tau", 0.9)), m=int(doc.get("m", 3)))


def estimate_correlations(corpus: list[Sequence], tau: float) -> CorrelationModel:
    """Empirical ``Pr(x_i = a | x_j = b)`` for all ordered pairs, kept when above ``tau``."""
    if len(corpus) < 2:
        raise ValueError("need at least two records to estimate correlations")
    length = len(corpus[0])
    if any(len(s) != length for s in corpus):
        raise ValueError("records have different lengths")
    m = max(s.m for s in corpus)
    data = np.array([s.points for s in corpus], dtype=np.int64)
    onehot = np.zeros((len(corpus), length * m), dtype=np.float64)
    cols = np.arange(length) * m
    for r in range(len(corpus)):
        onehot[r, cols + data[r]] = 1.0
    joint = onehot.T @ onehot
    marg = onehot.sum(axis=0)
    entries = {}
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = joint / marg[None, :]
    mask = (marg[None, :] > 0) & (cond > tau)
    for u, v in zip(*np.nonzero(mask)):
        i, a = divmod(int(u), m)
        j, b = divmod(int(v), m)
        if i != j:
            entries[(i, a, j, b)] = float(cond[u, v])
    return CorrelationModel(entries, tau=tau, m=m)


def state_support(seq, index: int, model: CorrelationModel, m: int | None = None) -> np.ndarray:
    """Presence probability of every state of ``seq[index]`` given the current data.

    Each partner ``x_c`` whose current value triggers a stored entry for this
    point contributes ``Pr(x_index = s | x_c)``; for states without a stored
    entry the residual ``(1 - p) / (m - 1)`` of that partner's strongest
    entry is used.  No partners gives 1 for every state.
    """
    m = m or model.m
    pts = seq.points if isinstance(seq, Sequence) else seq
    per_partner: dict[tuple[int, int], dict[int, float]] = defaultdict(dict)
    for a, j, b, p in model.incoming(index):
        if pts[j] == b:
            per_partner[(j, b)][a] = p
    support = np.ones(m)
    for stated in per_partner.values():
        top = max(stated.values())
        rest = (1.0 - top) / (m - 1)
        for s in range(m):
            support[s] *= stated.get(s, rest)
    return support


def presence_probability(seq, index: int, state: int, model: CorrelationModel) -> float:
    m = seq.m if isinstance(seq, Sequence) else model.m
    if not 0 <= state < m:
        raise ValueError(f"state {state} outside [0, {m - 1}]")
    return float(state_support(seq, index, model, m)[state])


def _ranked_states(support: np.ndarray, current: int, m: int) -> list[int]:
    # equal support: keep the current state first, then the predetermined target
    target = default_target(current, m)

    def key(s):
        return (-support[s], 0 if s == current else 1 if s == target else 2, s)

    return sorted(range(m), key=key)


def _buckets(ledger: SharingLedger, index_set: Iterable[int]) -> dict[int, list[int]]:
    idx = np.unique(np.fromiter((int(i) for i in index_set), dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= ledger.length):
        raise EmbeddingError(f"index set reaches outside [0, {ledger.length - 1}]")
    counts = ledger.per_point_counts[idx]
    out = defaultdict(list)
    for t in np.unique(counts).tolist():
        out[t] = idx[counts == t].tolist()
    return out


def embed_uncorrelated(ledger: SharingLedger, index_set, alloc, target_rule: TargetRule | None = None,
                       rng_seed=None, sp_id: str = "sp") -> tuple[Sequence, WatermarkPattern]:
    """Watermark ``alloc.y[i]`` uniformly chosen points from each bucket ``i``."""
    base = ledger.base
    target_rule = target_rule or default_target
    if len(alloc.y) != ledger.h + 1:
        raise EmbeddingError(f"allocation has {len(alloc.y)} buckets, ledger needs {ledger.h + 1}")
    rng = np.random.default_rng(rng_seed)
    buckets = _buckets(ledger, index_set)
    entries = []
    for t, k in enumerate(alloc.y):
        if k == 0:
            continue
        pool = buckets.get(t, [])
        if len(pool) < k:
            raise EmbeddingError(f"bucket {t} has {len(pool)} shared points, allocation needs {k}")
        for i in rng.choice(pool, size=k, replace=False):
            i = int(i)
            new = target_rule(base[i], base.m)
            if new == base[i]:
                raise EmbeddingError(f"target rule keeps point {i} at state {new}")
            entries.append((i, base[i], new))
    pattern = WatermarkPattern(sp_id, entries)
    return pattern.apply(base), pattern


def embed_correlated(ledger: SharingLedger, index_set, y, model: CorrelationModel, w: int,
                     sp_id: str = "sp") -> tuple[Sequence, WatermarkPattern]:
    """Correlation-preserving placement of ``w`` watermarks with per-bucket budgets ``y``.

    Points of each bucket are visited in ascending presence probability of
    their current state (ties by position) and moved to their best supported
    state; every change is pushed depth-first to the points correlated with
    the new state.  A second pass uses the second-ranked state when the
    budget is not yet spent.
    """
    base = ledger.base
    m = base.m
    Y = [int(v) for v in (y.y if hasattr(y, "y") else y)]
    if sum(Y) != w:
        raise EmbeddingError(f"bucket budgets sum to {sum(Y)}, expected w={w}")
    if len(Y) != ledger.h + 1:
        raise EmbeddingError(f"budget has {len(Y)} buckets, ledger needs {ledger.h + 1}")
    cur = list(base.points)
    counts = ledger.per_point_counts
    shared = set(int(i) for i in index_set)
    buckets = _buckets(ledger, shared)
    changed: dict[int, int] = {}
    remaining = [sum(Y)]

    def insert(j: int, d: int) -> None:
        stack = [(j, d)]
        while stack and remaining[0] > 0:
            k, s = stack.pop()
            t = int(counts[k])
            if k not in shared or k in changed or Y[t] == 0 or cur[k] == s:
                continue
            cur[k] = s
            changed[k] = s
            Y[t] -= 1
            remaining[0] -= 1
            partners = {}
            for c, a, p in model.outgoing(k, s):
                if c not in partners or p > partners[c][1]:
                    partners[c] = (a, p)
            for c in sorted(partners, reverse=True):
                stack.append((c, partners[c][0]))

    for rank in (0, 1):
        for t in range(len(Y)):
            if remaining[0] == 0:
                break
            pool = buckets.get(t, [])
            order = sorted(pool, key=lambda j: (state_support(cur, j, model, m)[cur[j]], j))
            for j in order:
                if remaining[0] == 0 or Y[t] == 0:
                    break
                if j in changed:
                    continue
                ranked = _ranked_states(state_support(cur, j, model, m), cur[j], m)
                insert(j, ranked[rank] if rank < len(ranked) else ranked[-1])
    if remaining[0] > 0:
        raise InsufficientWatermarkablePoints(
            f"placed {w - remaining[0]} of {w} watermarks; budgets left {Y}")
    pattern = WatermarkPattern(sp_id, [(i, base[i], s) for i, s in changed.items()])
    return pattern.apply(base), pattern

