"""Attacks on watermarked sequences.

The colluders align their copies column by column.  At a position where a
group of ``a`` copies shows one state and ``b`` copies another, either the
first group carries a watermark (the point was watermarked ``a`` times) or
the second does.  Knowing the sharing algorithm they know the bucket
histogram and weigh the two hypotheses by bucket size.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.stats import binom

from .allocation import objective_log10
from .core import CountHistogram, Sequence
from .embedder import CorrelationModel

EXACT_LIMIT = 10**4
CONFIDENT = 0.5


@dataclass(frozen=True)
class ColumnObservation:
    """States seen at one position across the colluders' copies.

    ``groups`` holds the copy indices of the two hypothesis classes and
    ``extra`` the copies outside them (treated as certainly watermarked).
    ``k`` is the size of the first group.
    """

    values: tuple[int, ...]
    groups: tuple[tuple[int, ...], tuple[int, ...]]
    extra: tuple[int, ...] = ()

    @property
    def h(self) -> int:
        return len(self.values)

    @property
    def k(self) -> int:
        return len(self.groups[0])


def observe_column(values) -> ColumnObservation:
    """Split a column into its two largest agreement classes."""
    values = tuple(int(v) for v in values)
    if not values:
        raise ValueError("a column needs at least one copy")
    counts = Counter(values)
    # largest classes first; ties by first appearance
    order = sorted(counts, key=lambda s: (-counts[s], values.index(s)))
    first = tuple(i for i, v in enumerate(values) if v == order[0])
    second = tuple(i for i, v in enumerate(values) if len(order) > 1 and v == order[1])
    extra = tuple(i for i, v in enumerate(values) if v not in order[:2])
    return ColumnObservation(values, (first, second), extra)


@dataclass
class AttackResult:
    claims: list[tuple[int, int]]
    confidence: list[float]
    success_fraction: float | None = None
    correct: list[bool] | None = None
    whole_identified: bool | None = None
    info: dict = field(default_factory=dict)

    @property
    def guessed_watermark(self) -> set[tuple[int, int]]:
        return set(self.claims)

    @property
    def per_position_confidence(self) -> dict[tuple[int, int], float]:
        return dict(zip(self.claims, self.confidence))

    def identified(self, threshold: float = CONFIDENT) -> int:
        """Correct claims the attacker holds with confidence above ``threshold``."""
        if self.correct is None:
            raise ValueError("no ground truth was supplied")
        return sum(1 for ok, c in zip(self.correct, self.confidence) if ok and c > threshold)


def _pair_prob(hist, a: int, b: int) -> float:
    na, nb = hist[a], hist[b]
    if na + nb == 0:
        return 0.5
    return na / (na + nb)


def collusion_posterior(k: int, hist: CountHistogram) -> tuple[float, float]:
    """Probability that the ``k``-copy group, resp. the ``h-k`` group, is the watermarked one."""
    h = hist.h
    if not 0 <= k <= h:
        raise ValueError(f"k={k} outside [0, {h}]")
    p = _pair_prob(hist, k, h - k)
    return p, 1.0 - p


@dataclass(frozen=True)
class PartialPosterior:
    """Rows ``(u, P_u, p_{k+u}, p_{h+t-k-u})`` for ``u = 0..t``."""

    k: int
    h: int
    t: int
    rows: tuple[tuple[int, float, float, float], ...]
    degenerate: bool = False

    def joint(self) -> list[tuple[float, float]]:
        return [(pu * pa, pu * pb) for _, pu, pa, pb in self.rows]

    def group_probability(self) -> float:
        """Total weight of the hypothesis that the ``k``-copy group is watermarked."""
        return sum(a for a, _ in self.joint())


def partial_knowledge_posterior(k: int, h: int, t: int, hist_ht: CountHistogram) -> PartialPosterior:
    """Posterior when the colluders assume ``t`` sharings they did not see."""
    if not 0 <= k <= h:
        raise ValueError(f"k={k} outside [0, {h}]")
    if t < 0:
        raise ValueError("t must be non-negative")
    if hist_ht.h != h + t:
        raise ValueError(f"histogram covers {hist_ht.h} sharings, expected {h + t}")
    n = hist_ht
    pair = [(n[k + u], n[h + t - k - u]) for u in range(t + 1)]
    z = sum(a + b for a, b in pair)
    if z == 0:
        rows = tuple((u, 1.0 / (t + 1), 0.5, 0.5) for u in range(t + 1))
        return PartialPosterior(k, h, t, rows, degenerate=True)
    rows = []
    for u, (a, b) in enumerate(pair):
        pu = (a + b) / z
        pa = a / (a + b) if a + b else 0.5
        rows.append((u, pu, pa, 1.0 - pa if a + b else 0.5))
    return PartialPosterior(k, h, t, tuple(rows))


def _hypothesis_prob(obs: ColumnObservation, hist: CountHistogram, t: int = 0) -> float:
    """Probability that ``obs.groups[0]`` (plus ``extra``) is the watermarked set."""
    a, b, e = len(obs.groups[0]), len(obs.groups[1]), len(obs.extra)
    if t == 0:
        if a + e > hist.h or b + e > hist.h:
            return 0.5
        return _pair_prob(hist, a + e, b + e)
    # marginalise over u hidden copies matching the first group
    num = den = 0.0
    for u in range(t + 1):
        ca, cb = a + e + u, b + e + t - u
        na = hist[ca] if ca <= hist.h else 0
        nb = hist[cb] if cb <= hist.h else 0
        num += na
        den += na + nb
    if den == 0:
        return 0.5
    return num / den


def column_hypotheses(copies, hist: CountHistogram, t: int = 0) -> list[tuple[ColumnObservation, float]]:
    mat = _matrix(copies)
    out = []
    for c in range(mat.shape[1]):
        obs = observe_column(mat[:, c])
        out.append((obs, _hypothesis_prob(obs, hist, t)))
    return out


def _matrix(copies) -> np.ndarray:
    rows = [c.points if isinstance(c, Sequence) else c for c in copies]
    if not rows:
        raise ValueError("no copies supplied")
    length = len(rows[0])
    if any(len(r) != length for r in rows):
        raise ValueError("copies have different lengths")
    return np.asarray(rows, dtype=np.int64)


def collusion_attack(copies, hist: CountHistogram, w: int, mode="exact", *, t: int = 0,
                     hist_ht: CountHistogram | None = None, truth: Iterable[tuple[int, int]] | None = None,
                     rng_seed=None, budget: int | None = None) -> AttackResult:
    """Claim watermarked (copy, position) pairs from aligned copies.

    Per column the more probable hypothesis is taken (or, with ``rng_seed``,
    one is drawn from the posterior).  Columns are claimed in descending
    confidence until ``budget`` claims (default ``len(copies) * w``) are made;
    if the chosen hypotheses leave the budget unfilled, the alternative
    hypotheses are claimed next, again by descending confidence.
    """
    mat = _matrix(copies)
    n_copies, length = mat.shape
    if mode == "partial" or (isinstance(mode, tuple) and mode[0] == "partial"):
        t = mode[1] if isinstance(mode, tuple) else t
        hist_use = hist_ht
        if hist_use is None or hist_use.h != n_copies + t:
            raise ValueError("partial mode needs the histogram for h + t sharings")
    else:
        t = 0
        hist_use = hist
    rng = np.random.default_rng(rng_seed) if rng_seed is not None else None
    budget = n_copies * w if budget is None else budget

    primary, alternative = [], []
    for c in range(length):
        obs = observe_column(mat[:, c])
        p_first = _hypothesis_prob(obs, hist_use, t)
        if rng is not None:
            pick_first = rng.random() < p_first
        else:
            pick_first = p_first >= 0.5
        g_first = obs.groups[0] + obs.extra
        g_second = obs.groups[1] + obs.extra
        chosen, other = (g_first, g_second) if pick_first else (g_second, g_first)
        pc = p_first if pick_first else 1.0 - p_first
        primary.append((pc, c, chosen))
        alternative.append((1.0 - pc, c, tuple(i for i in other if i not in chosen)))

    claims, conf, seen = [], [], set()
    hypothesis = {c: set(g) for _, c, g in primary}
    for pool in (primary, alternative):
        for pc, c, group in sorted(pool, key=lambda e: (-e[0], e[1])):
            if len(claims) >= budget:
                break
            for i in group:
                if len(claims) < budget and (i, c) not in seen:
                    claims.append((i, c))
                    conf.append(pc)
                    seen.add((i, c))
    result = AttackResult(claims, conf)
    if truth is not None:
        _score(result, truth)
        truth_cols: dict[int, set[int]] = {}
        for i, c in truth:
            truth_cols.setdefault(c, set()).add(i)
        result.whole_identified = all(hypothesis[c] == truth_cols.get(c, set()) for c in range(length))
    return result


def _score(result: AttackResult, truth) -> None:
    truth = set((int(i), int(c)) for i, c in truth)
    result.correct = [cl in truth for cl in result.claims]
    result.success_fraction = (sum(result.correct) / len(truth)) if truth else 1.0


def whole_watermark_probability(hists) -> float:
    """log10 probability of recovering the whole watermark after the last sharing."""
    hist = hists[-1] if isinstance(hists, (list, tuple)) and not isinstance(hists, CountHistogram) else hists
    return objective_log10(hist)


def fraction_inference_probability(hist: CountHistogram, f: float, method: str = "exact",
                                   trials: int = 10**5, seed=None) -> float:
    """Probability that the colluders recover at least ``f`` of the watermark.

    Each column is resolved correctly with the posterior of its true
    hypothesis, independently across columns.  A correct column in bucket
    ``i`` yields ``i`` watermarked (copy, position) pairs, and the target is
    ``f`` times their total.  ``f = 1`` means the whole pattern, which also
    requires the never-watermarked columns to be resolved.
    """
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"f must lie in [0, 1], got {f}")
    h = hist.h
    q = [_pair_prob(hist, i, h - i) for i in range(h + 1)]
    total = sum(i * hist[i] for i in range(1, h + 1))
    need = math.ceil(f * total - 1e-9)
    if f == 0.0 or total == 0 and f < 1.0:
        return 1.0
    if method == "exact":
        if hist.length > EXACT_LIMIT:
            raise ValueError(f"exact method refused for {hist.length} points (limit {EXACT_LIMIT})")
        if f >= 1.0:
            return 10.0 ** objective_log10(hist)
        pmf = np.array([1.0])
        for i in range(1, h + 1):
            ni = hist[i]
            if ni == 0:
                continue
            part = binom.pmf(np.arange(ni + 1), ni, q[i])
            spread = np.zeros(i * ni + 1)
            spread[:: i] = part
            pmf = np.convolve(pmf, spread)
        return float(pmf[need:].sum())
    if method == "montecarlo":
        rng = np.random.default_rng(seed)
        got = np.zeros(trials, dtype=np.int64)
        for i in range(1, h + 1):
            if hist[i]:
                got += i * rng.binomial(hist[i], q[i], size=trials)
        ok = got >= need
        if f >= 1.0:
            ok &= rng.binomial(hist[0], q[0], size=trials) == hist[0]
        return float(ok.mean())
    raise ValueError(f"unknown method {method!r}")


def correlation_scores(copy, model: CorrelationModel) -> np.ndarray:
    """``max(p(x^w) - p(x^n), 0)`` for every point of one copy."""
    pts = copy.points if isinstance(copy, Sequence) else tuple(copy)
    scores = np.zeros(len(pts))
    for i in range(len(pts)):
        pw = pn = 0.0
        for a, j, b, p in model.incoming(i):
            if pts[j] != b:
                continue
            if a == pts[i]:
                pn = max(pn, p)
            else:
                pw = max(pw, p)
        scores[i] = min(max(pw - pn, 0.0), 1.0)
    return scores


def correlation_attack(copy, model: CorrelationModel, w: int, *, truth=None, rng_seed=None,
                       copy_id: int = 0) -> AttackResult:
    """Flag the ``w`` points that most violate the known correlations.

    If fewer than ``w`` points have a positive score the rest are blind
    guesses at the prior ``w / len(copy)``.
    """
    scores = correlation_scores(copy, model)
    length = len(scores)
    order = sorted((i for i in range(length) if scores[i] > 0), key=lambda i: (-scores[i], i))[:w]
    claims = [(copy_id, i) for i in order]
    conf = [float(scores[i]) for i in order]
    if len(claims) < w:
        rest = [i for i in range(length) if scores[i] <= 0]
        if rng_seed is not None:
            rest = list(np.random.default_rng(rng_seed).permutation(rest))
        for i in rest[: w - len(claims)]:
            claims.append((copy_id, int(i)))
            conf.append(w / length)
    result = AttackResult(claims, conf, info={"positive": len(order)})
    if truth is not None:
        _score(result, [(copy_id, i) for i in truth])
    return result


def combined_attack(copies, model: CorrelationModel, hist: CountHistogram, w: int, truths) -> AttackResult:
    """Correlation attack per copy, then collusion for the rest on the best copy.

    ``truths[c]`` is the set of watermarked positions of copy ``c``.  As a
    worst case for the owner the colluders keep the correct correlation
    detections of the copy with the most of them (``m`` points) and claim
    the remaining ``w - m`` positions of that copy from the collusion
    posterior.
    """
    if len(copies) < 1:
        raise ValueError("need at least one copy")
    per_copy = []
    for c, copy in enumerate(copies):
        r = correlation_attack(copy, model, w, truth=truths[c], copy_id=c)
        positive = r.info["positive"]
        kept = [(cl, cf) for cl, cf, ok in zip(r.claims[:positive], r.confidence, r.correct) if ok]
        per_copy.append((len(kept), -c, kept))
    m_hits, neg_c, kept = max(per_copy, key=lambda e: (e[0], e[1]))
    c = -neg_c
    claims = [cl for cl, _ in kept]
    conf = [cf for _, cf in kept]
    seen = {pos for _, pos in claims}
    if len(claims) < w:
        coll = collusion_attack(copies, hist, w, budget=len(copies) * len(copies[0]))
        for (i, pos), pc in zip(coll.claims, coll.confidence):
            if len(claims) >= w:
                break
            if i == c and pos not in seen:
                claims.append((c, pos))
                conf.append(pc)
                seen.add(pos)
    result = AttackResult(claims, conf, info={"copy": c, "m": m_hits})
    _score(result, [(c, i) for i in truths[c]])
    return result


def true_hypothesis_log10(copies, marked, hist: CountHistogram, t: int = 0) -> float:
    """log10 probability the colluders resolve every column to its true hypothesis.

    ``marked[c, j]`` is true when copy ``c`` carries a watermark at ``j``.
    With ``t = 0`` and all sharings among the copies this equals the
    allocation objective of ``hist``.
    """
    mat = _matrix(copies)
    mask = np.asarray(marked, dtype=np.int64)
    if mask.shape != mat.shape:
        raise ValueError(f"mask shape {mask.shape} differs from copies {mat.shape}")
    h = mat.shape[0]
    rows, mult = np.unique(np.vstack([mat, mask]).T, axis=0, return_counts=True)
    total = 0.0
    for row, count in zip(rows, mult):
        obs = observe_column(row[:h])
        truth = {i for i in range(h) if row[h + i]}
        p_first = _hypothesis_prob(obs, hist, t)
        if truth == set(obs.groups[0] + obs.extra):
            p = p_first
        elif truth == set(obs.groups[1] + obs.extra):
            p = 1.0 - p_first
        else:
            p = 0.0
        if p == 0.0:
            return -math.inf
        total += int(count) * math.log10(p)
    return total


def modify_majority(copies) -> Sequence:
    """Column-wise majority; ties go to the tied state seen first across the copies."""
    mat = _matrix(copies)
    m = max(c.m for c in copies) if isinstance(copies[0], Sequence) else int(mat.max()) + 1
    out = mat[0].copy()
    differ = np.flatnonzero((mat != mat[0]).any(axis=0))
    for c in differ:
        col = mat[:, c]
        counts = Counter(col.tolist())
        top = max(counts.values())
        for v in col:
            if counts[int(v)] == top:
                out[c] = v
                break
    return Sequence.from_array(out, m)


def add_noise(seq: Sequence, count: int, rng_seed=None) -> Sequence:
    """Change ``count`` distinct random positions to a random different state."""
    length = len(seq)
    if count < 0 or count > length:
        raise ValueError(f"noise count {count} outside [0, {length}]")
    rng = np.random.default_rng(rng_seed)
    arr = seq.to_array()
    pos = rng.choice(length, size=count, replace=False)
    shift = rng.integers(1, seq.m, size=count)
    arr[pos] = (arr[pos] + shift) % seq.m
    return Sequence.from_array(arr, seq.m)


def noise_count(pi: float, w: int) -> int:
    return int(math.floor(pi * w + 0.5))


def partial_share(seq: Sequence, fraction: float, rng_seed=None) -> tuple[list[int], list[int]]:
    """Uniformly chosen ``floor(fraction * len)`` positions with their values."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    length = len(seq)
    k = int(math.floor(fraction * length + 1e-9))
    rng = np.random.default_rng(rng_seed)
    idx = sorted(int(i) for i in rng.choice(length, size=k, replace=False))
    return idx, [seq[i] for i in idx]


__all__ = [
    "AttackResult", "ColumnObservation", "PartialPosterior", "add_noise", "collusion_attack",
    "collusion_posterior", "column_hypotheses", "combined_attack", "correlation_attack",
    "correlation_scores", "fraction_inference_probability", "modify_majority",
    "noise_count", "observe_column", "partial_knowledge_posterior", "partial_share",
    "true_hypothesis_log10", "whole_watermark_probability",
]
