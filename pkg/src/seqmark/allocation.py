"""Per-sharing allocation of new watermarks across watermark-count buckets.

For the (h+1)-th sharing, ``y[i]`` points that were watermarked ``i`` times
so far receive a new watermark and ``y_hat[i] = n[i] - y[i]`` do not.  The
resulting histogram is

    next[0] = y_hat[0],  next[h+1] = y[h],  next[i] = y[i-1] + y_hat[i]

and the allocation minimises the colluders' probability of recovering the
whole watermark, ``prod_i (next[i] / (next[i] + next[h+1-i])) ** next[i]``,
subject to ``sum(y) = w`` and ``y[0] >= 1``.  Everything is kept in log10.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import CountHistogram

EXHAUSTIVE_LIMIT = 10**6
BRUTE_FORCE_LIMIT = 10**7
RESTARTS = 32
_TIE = 1e-9


class InfeasibleAllocation(ValueError):
    pass


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class AllocationSolution:
    y: tuple[int, ...]
    y_hat: tuple[int, ...]
    next_counts: CountHistogram
    log10_objective: float

    @property
    def w(self) -> int:
        return sum(self.y)

    def to_json(self) -> dict:
        return {
            "y": list(self.y),
            "y_hat": list(self.y_hat),
            "next_counts": list(self.next_counts.n),
            "log10_objective": self.log10_objective,
        }


def objective_log10(hist) -> float:
    """log10 of ``prod_i (n_i / (n_i + n_{H-i})) ** n_i`` with ``H = len(n) - 1``.

    Empty buckets contribute nothing.
    """
    n = hist.n if isinstance(hist, CountHistogram) else tuple(hist)
    total = 0.0
    top = len(n) - 1
    for i, ni in enumerate(n):
        if ni > 0:
            total += ni * math.log10(ni / (ni + n[top - i]))
    return total


def _objective_batch(nxt: np.ndarray) -> np.ndarray:
    """Row-wise objective for a (k, H+1) array of histograms."""
    nxt = nxt.astype(np.float64)
    pair = nxt[:, ::-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(nxt > 0, nxt * np.log10(nxt / (nxt + pair)), 0.0)
    return terms.sum(axis=1)


def _next_batch(n: np.ndarray, ys: np.ndarray) -> np.ndarray:
    k, cols = ys.shape
    nxt = np.zeros((k, cols + 1), dtype=np.int64)
    nxt[:, :cols] += n - ys
    nxt[:, 1:] += ys
    return nxt


def next_counts(hist: CountHistogram, y) -> CountHistogram:
    """Histogram after watermarking ``y[i]`` points from each bucket ``i``."""
    n = hist.n
    h = len(n) - 1
    out = [0] * (h + 2)
    for i in range(h + 1):
        out[i] += n[i] - y[i]
        out[i + 1] += y[i]
    return CountHistogram(tuple(out))


def _solution(hist: CountHistogram, y) -> AllocationSolution:
    y = tuple(int(v) for v in y)
    nxt = next_counts(hist, y)
    return AllocationSolution(
        y=y,
        y_hat=tuple(ni - yi for ni, yi in zip(hist.n, y)),
        next_counts=nxt,
        log10_objective=objective_log10(nxt),
    )


def _check_feasible(hist: CountHistogram, w: int) -> None:
    if w < 1:
        raise InfeasibleAllocation(f"watermark length must be positive, got {w}")
    if w > hist.length:
        raise InfeasibleAllocation(f"w={w} exceeds data length {hist.length}")
    if hist.n[0] < 1:
        raise InfeasibleAllocation("no never-watermarked point left (n_0 = 0)")


def count_candidates(n, w: int, cap: int = BRUTE_FORCE_LIMIT + 1) -> int:
    """Number of integer vectors with sum w, 0 <= y_i <= n_i and y_0 >= 1, saturated at ``cap``."""
    ways = np.zeros(w + 1, dtype=np.int64)
    ways[0] = 1
    for i, ni in enumerate(n):
        lo = 1 if i == 0 else 0
        hi = min(int(ni), w)
        csum = np.concatenate(([0], np.cumsum(ways)))
        r = np.arange(w + 1)
        upper = r - lo + 1
        lower = np.maximum(r - hi, 0)
        new = np.where(upper > lower, csum[np.clip(upper, 0, w + 1)] - csum[lower], 0)
        ways = np.minimum(new, cap)
    return int(ways[w])


def _better(f, y, best_f, best_y) -> bool:
    if best_y is None or f < best_f - _TIE:
        return True
    return abs(f - best_f) <= _TIE and tuple(y) < tuple(best_y)


def _enumerate(n: tuple[int, ...], w: int):
    """Yield feasible y vectors in lexicographic order."""
    h = len(n) - 1
    suffix = [0] * (h + 2)
    for i in range(h, -1, -1):
        suffix[i] = suffix[i + 1] + n[i]
    y = [0] * (h + 1)

    def rec(i, rem):
        if i == h:
            if rem <= n[h]:
                y[h] = rem
                yield tuple(y)
            return
        lo = max(1 if i == 0 else 0, rem - suffix[i + 1])
        for v in range(lo, min(n[i], rem) + 1):
            y[i] = v
            yield from rec(i + 1, rem - v)

    yield from rec(0, w)


def _solve_exhaustive(hist: CountHistogram, w: int) -> tuple[int, ...]:
    n = np.asarray(hist.n, dtype=np.int64)
    best_f, best_y = math.inf, None
    chunk: list[tuple[int, ...]] = []

    def flush():
        nonlocal best_f, best_y
        ys = np.asarray(chunk, dtype=np.int64)
        fs = _objective_batch(_next_batch(n, ys))
        k = int(np.argmin(fs))
        # chunk is lexicographic, so the first minimum is the smallest y among exact ties
        cand = np.flatnonzero(fs <= fs[k] + _TIE)[0]
        if _better(float(fs[cand]), chunk[cand], best_f, best_y):
            best_f, best_y = float(fs[cand]), chunk[cand]
        chunk.clear()

    for y in _enumerate(hist.n, w):
        chunk.append(y)
        if len(chunk) >= 65536:
            flush()
    if chunk:
        flush()
    return best_y


def _greedy_start(n: np.ndarray, w: int) -> np.ndarray:
    """Add watermarks one bucket-chunk at a time where the objective drops most."""
    y = np.zeros_like(n)
    y[0] = 1
    rem = w - 1
    eye = np.eye(len(n), dtype=np.int64)
    while rem > 0:
        step = max(1, rem // 8)
        room = n - y
        ok = room > 0
        steps = np.minimum(room, step)
        cands = y + eye * steps[:, None]
        fs = _objective_batch(_next_batch(n, cands))
        fs[~ok] = np.inf
        j = int(np.argmin(fs))
        y[j] += steps[j]
        rem -= int(steps[j])
    return y


def _random_start(n: np.ndarray, w: int, rng: np.random.Generator) -> np.ndarray:
    y = np.zeros_like(n)
    y[0] = 1
    rem = w - 1
    weights = rng.dirichlet(np.ones(len(n)))
    order = rng.permutation(len(n))
    for j in order:
        take = min(int(round(weights[j] * (w - 1))), int(n[j] - y[j]), rem)
        y[j] += take
        rem -= take
    for j in order:
        take = min(int(n[j] - y[j]), rem)
        y[j] += take
        rem -= take
    return y


def _descend(n: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Steepest descent over transfers of ``s`` units from bucket i to bucket j."""
    cols = len(n)
    pairs = [(i, j) for i in range(cols) for j in range(cols) if i != j]
    src = np.array([p[0] for p in pairs])
    dst = np.array([p[1] for p in pairs])
    f = float(_objective_batch(_next_batch(n, y[None, :]))[0])
    w = int(y.sum())
    sizes = [1 << k for k in range(max(1, w.bit_length()))]
    while True:
        best = None
        for s in sizes:
            lo = np.where(src == 0, 1, 0)
            ok = (y[src] - s >= lo) & (y[dst] + s <= n[dst])
            if not ok.any():
                continue
            idx = np.flatnonzero(ok)
            cands = np.repeat(y[None, :], len(idx), axis=0)
            cands[np.arange(len(idx)), src[idx]] -= s
            cands[np.arange(len(idx)), dst[idx]] += s
            fs = _objective_batch(_next_batch(n, cands))
            k = int(np.argmin(fs))
            if fs[k] < f - _TIE and (best is None or fs[k] < best[0]):
                best = (float(fs[k]), cands[k])
        if best is None:
            return f, y
        f, y = best


def _solve_local(hist: CountHistogram, w: int, restarts: int = RESTARTS, seed: int = 0) -> tuple[int, ...]:
    n = np.asarray(hist.n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    starts = [_greedy_start(n, w)] + [_random_start(n, w, rng) for _ in range(restarts)]
    results = [_descend(n, y0.copy()) for y0 in starts]
    best_f, best_y = math.inf, None
    for f, y in results:
        if _better(f, tuple(int(v) for v in y), best_f, best_y):
            best_f, best_y = f, tuple(int(v) for v in y)
    return best_y


def solve_allocation(hist: CountHistogram, w: int, *, exhaustive_limit: int = EXHAUSTIVE_LIMIT,
                     restarts: int = RESTARTS) -> AllocationSolution:
    """Choose how many points per bucket get the next watermark.

    Exact enumeration when the candidate count is at most ``exhaustive_limit``,
    otherwise steepest descent from a greedy start plus ``restarts`` seeded
    random starts.  Exact ties go to the lexicographically smallest ``y``.
    """
    _check_feasible(hist, w)
    if hist.h == 0:
        return _solution(hist, (w,))
    if count_candidates(hist.n, w) <= exhaustive_limit:
        y = _solve_exhaustive(hist, w)
    else:
        y = _solve_local(hist, w, restarts=restarts)
    return _solution(hist, y)


def brute_force_allocation(hist: CountHistogram, w: int) -> AllocationSolution:
    """Reference optimum by plain enumeration; used as a test oracle."""
    _check_feasible(hist, w)
    n = hist.n
    total = count_candidates(n, w)
    if total > BRUTE_FORCE_LIMIT:
        raise InstanceTooLarge(f"{total} candidates exceed the brute-force limit")
    best_f, best_y = math.inf, None
    for y in _all_vectors(n, w):
        nxt = [0] * (len(n) + 1)
        for i, (ni, yi) in enumerate(zip(n, y)):
            nxt[i] += ni - yi
            nxt[i + 1] += yi
        f = objective_log10(nxt)
        if _better(f, y, best_f, best_y):
            best_f, best_y = f, y
    return _solution(hist, best_y)


def _all_vectors(n, w):
    for y in itertools.product(*(range(0, ni + 1) for ni in n)):
        if sum(y) == w and y[0] >= 1:
            yield y


def iterate_allocation(length: int, w: int, h: int, **kw) -> list[AllocationSolution]:
    """Allocations for sharings 1..h starting from an unshared sequence."""
    hist = CountHistogram.initial(length)
    out = []
    for _ in range(h):
        sol = solve_allocation(hist, w, **kw)
        out.append(sol)
        hist = sol.next_counts
    return out


_CHAINS: dict[tuple[int, int], list[AllocationSolution]] = {}


def allocation_chain(length: int, w: int, h: int) -> tuple[AllocationSolution, ...]:
    """Allocations for sharings 1..h, cached and extended on demand."""
    sols = _CHAINS.setdefault((length, w), [])
    hist = sols[-1].next_counts if sols else CountHistogram.initial(length)
    while len(sols) < h:
        sols.append(solve_allocation(hist, w))
        hist = sols[-1].next_counts
    return tuple(sols[:h])


def histogram_chain(length: int, w: int, h: int) -> tuple[CountHistogram, ...]:
    """Histograms after 0..h sharings of iterated allocation."""
    return (CountHistogram.initial(length),) + tuple(s.next_counts for s in allocation_chain(length, w, h))


def solve_allocation_weighted(hist: CountHistogram, beta: float, w_max: int,
                              *, solver=None) -> tuple[int, AllocationSolution]:
    """Trade inference probability against watermark length.

    Minimises ``beta * P + (1 - beta) * w`` over ``1 <= w < w_max`` where ``P``
    is the (linear) whole-watermark inference probability of the best
    allocation for that ``w``.  Returns ``(w, solution)``.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if w_max > hist.length:
        raise InfeasibleAllocation(f"w_max={w_max} exceeds data length {hist.length}")
    if w_max < 2:
        raise InfeasibleAllocation("w_max must be at least 2 so that some w < w_max exists")
    solver = solver or solve_allocation
    best = None
    for w in range(1, w_max):
        sol = solver(hist, w)
        score = beta * 10.0 ** sol.log10_objective + (1.0 - beta) * w
        # relative tie test: the probability term can be far below any absolute tolerance
        if best is None or (score < best[0] and not math.isclose(score, best[0], rel_tol=1e-12)):
            best = (score, w, sol)
    return best[1], best[2]
