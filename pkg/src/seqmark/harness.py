"""Data ingestion, synthetic correlated data, seeded experiment campaigns and result files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adversary, detector
from .allocation import allocation_chain, histogram_chain, objective_log10
from .core import Sequence, SharingLedger, record_sharing, utility
from .embedder import CorrelationModel, embed_correlated, embed_uncorrelated, estimate_correlations

SCENARIOS = (
    "collusion", "partial_knowledge", "correlation", "combined",
    "partial_share", "modification_single", "modification_collusion",
)
WORKERS_ENV = "SEQMARK_WORKERS"


class ExperimentError(RuntimeError):
    pass


def watermark_length(length: int, ratio: float) -> int:
    """``w = round(ratio * length)``, halves rounded up."""
    return int(math.floor(ratio * length + 0.5))


@dataclass
class ExperimentConfig:
    scenario: str
    length: int = 7690
    m: int = 3
    r: float | None = 0.05
    w: int | None = None
    h: int = 1
    t: int = 0
    total_sharings: int | None = None
    pi: float = 0.0
    fractions: tuple[float, ...] = (1.0,)
    phi: int = 1
    phi_hat: int | None = None
    trials: int = 1000
    seed: int = 0
    data: str = "synthetic"
    embedding: str = "uncorrelated"
    tau: float = 0.9
    n_records: int = 1000
    block: int = 2
    correlation_p: float = 0.96

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in (self.fractions if isinstance(self.fractions, (list, tuple))
                                                  else [self.fractions]))
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        if self.length < 1 or self.m < 2 or self.h < 1 or self.trials < 1:
            raise ValueError("length, h and trials must be positive and m >= 2")
        if self.w is None:
            if self.r is None or not 0 < self.r <= 1:
                raise ValueError("give r in (0, 1] or an explicit w")
            self.w = watermark_length(self.length, self.r)
        if not 1 <= self.w <= self.length:
            raise ValueError(f"w={self.w} outside [1, {self.length}]")
        if self.t < 0 or self.pi < 0:
            raise ValueError("t and pi must be non-negative")
        if any(not 0 <= f <= 1 for f in self.fractions):
            raise ValueError("fractions must lie in [0, 1]")
        if self.embedding not in ("uncorrelated", "correlated"):
            raise ValueError(f"unknown embedding {self.embedding!r}")
        if self.scenario == "modification_collusion" and not 1 <= self.phi <= self.h:
            raise ValueError(f"phi={self.phi} outside [1, {self.h}]")
        if self.phi_hat is not None and not 1 <= self.phi_hat <= self.h:
            raise ValueError(f"phi_hat={self.phi_hat} outside [1, {self.h}]")
        if self.scenario == "partial_knowledge":
            total = self.total_sharings or self.h
            if total < self.h:
                raise ValueError("total_sharings must be at least h")
        if self.scenario == "partial_share" and any(f <= 0 for f in self.fractions):
            raise ValueError("shared fractions must be positive")

    @classmethod
    def from_json(cls, doc: dict, **overrides) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**merged)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        return cls.from_json(json.loads(Path(path).read_text()), **overrides)

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["fractions"] = list(self.fractions)
        return doc


# ---------------------------------------------------------------- data


def load_matrix(path, m: int = 3) -> list[Sequence]:
    """Read a CSV of integer states, one record per row."""
    out = []
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for c, cell in enumerate(row, start=1):
                try:
                    v = int(cell.strip())
                except ValueError:
                    raise ValueError(f"{path}: row {r}, column {c}: cannot parse {cell!r}") from None
                if not 0 <= v < m:
                    raise ValueError(f"{path}: row {r}, column {c}: state {v} outside [0, {m - 1}]")
                vals.append(v)
            if out and len(vals) != len(out[0]):
                raise ValueError(f"{path}: row {r} has {len(vals)} columns, expected {len(out[0])}")
            out.append(Sequence(tuple(vals), m))
    if not out:
        raise ValueError(f"{path}: no records")
    return out


def save_matrix(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for rec in records:
            writer.writerow(rec.points if isinstance(rec, Sequence) else rec)


def pair_block_spec(length: int, m: int, p: float, block: int = 2) -> list[tuple[int, int, int, int, float]]:
    """Each block's first column drives the others: ``x_i`` copies ``x_j`` with probability ``p``."""
    if block < 2:
        return []
    spec = []
    for start in range(0, length - block + 1, block):
        for i in range(start + 1, start + block):
            spec.extend((i, b, start, b, p) for b in range(m))
    return spec


def generate_synthetic(length: int, m: int, n_records: int, spec, seed=None) -> list[Sequence]:
    """Records with planted pairwise dependencies.

    Each spec entry ``(i, a, j, b, p)`` forces ``x_i = a`` with probability
    ``p`` whenever ``x_j = b``; otherwise ``x_i`` takes a uniformly chosen
    different state.  Columns not driven by any entry are i.i.d. uniform.
    """
    if length < 1 or n_records < 1 or m < 2:
        raise ValueError("length, n_records must be positive and m >= 2")
    rules: dict[int, dict] = {}
    for i, a, j, b, p in spec:
        if not (0 <= i < length and 0 <= j < length and 0 <= a < m and 0 <= b < m):
            raise ValueError(f"spec entry {(i, a, j, b, p)} out of range")
        if not 0 < p <= 1 or i == j:
            raise ValueError(f"spec entry {(i, a, j, b, p)} is invalid")
        rule = rules.setdefault(i, {"source": j, "map": {}})
        if rule["source"] != j:
            raise ValueError(f"column {i} is driven by both {rule['source']} and {j}")
        if b in rule["map"] and rule["map"][b] != (a, p):
            raise ValueError(f"contradictory entries for column {i} given x_{j}={b}")
        rule["map"][b] = (a, p)
    order = _drive_order(rules, length)
    rng = np.random.default_rng(seed)
    data = rng.integers(0, m, size=(n_records, length))
    for i in order:
        src = data[:, rules[i]["source"]]
        col = data[:, i]
        forced = rng.random(n_records)
        other = rng.integers(1, m, size=n_records)
        for b, (a, p) in rules[i]["map"].items():
            hit = src == b
            col[hit] = np.where(forced[hit] < p, a, (a + other[hit]) % m)
    return [Sequence(tuple(int(v) for v in row), m) for row in data]


def _drive_order(rules: dict, length: int) -> list[int]:
    state = {}
    order = []
    for start in sorted(rules):
        stack = [(start, False)]
        while stack:
            i, done = stack.pop()
            if done:
                state[i] = 2
                order.append(i)
                continue
            if state.get(i) == 2:
                continue
            if state.get(i) == 1:
                raise ValueError(f"cyclic forcing through column {i}")
            state[i] = 1
            stack.append((i, True))
            src = rules[i]["source"]
            if src in rules:
                if state.get(src) == 1:
                    raise ValueError(f"cyclic forcing through column {src}")
                if state.get(src) != 2:
                    stack.append((src, False))
    return order


# ---------------------------------------------------------------- trials


@dataclass
class _Context:
    config: ExperimentConfig
    records: list[Sequence] | None = None
    model: CorrelationModel | None = None
    spec: list = field(default_factory=list)


def _context(cfg: ExperimentConfig) -> _Context:
    ctx = _Context(cfg)
    if cfg.data != "synthetic":
        ctx.records = load_matrix(cfg.data, cfg.m)
        if len(ctx.records[0]) < cfg.length:
            raise ValueError(f"data has {len(ctx.records[0])} columns, config needs {cfg.length}")
    if cfg.scenario in ("correlation", "combined"):
        ctx.spec = pair_block_spec(cfg.length, cfg.m, cfg.correlation_p, cfg.block)
        corpus = ctx.records or generate_synthetic(cfg.length, cfg.m, cfg.n_records, ctx.spec, cfg.seed)
        corpus = [Sequence(r.points[: cfg.length], cfg.m) for r in corpus]
        ctx.model = estimate_correlations(corpus, cfg.tau)
    return ctx


def _owner(ctx: _Context, trial_seed: int, trial: int) -> Sequence:
    cfg = ctx.config
    if ctx.records is not None:
        rec = ctx.records[trial % len(ctx.records)]
        return Sequence(rec.points[: cfg.length], cfg.m)
    # owner records come from a stream disjoint from the corpus seed
    return generate_synthetic(cfg.length, cfg.m, 1, ctx.spec, [cfg.seed, 1, trial_seed])[0]


def _share(ctx: _Context, base: Sequence, sharings: int, rng: np.random.Generator) -> SharingLedger:
    """Share ``base`` ``sharings`` times with SPs ``sp01, sp02, ...``."""
    cfg = ctx.config
    chain = allocation_chain(cfg.length, cfg.w, sharings)
    ledger = SharingLedger(base)
    everything = range(cfg.length)
    for k in range(sharings):
        sp = f"sp{k + 1:02d}"
        alloc = chain[k]
        if cfg.embedding == "correlated":
            _, pattern = embed_correlated(ledger, everything, alloc, ctx.model, cfg.w, sp_id=sp)
        else:
            _, pattern = embed_uncorrelated(ledger, everything, alloc, rng_seed=rng.integers(2**63), sp_id=sp)
        record_sharing(ledger, sp, everything, pattern)
    return ledger


def _fraction_hits(identified: int, total: int, fractions) -> dict:
    return {f"p_f{f:g}": float(identified >= math.ceil(f * total - 1e-9)) for f in fractions}


def _trial(ctx: _Context, trial: int) -> list[dict]:
    cfg = ctx.config
    seed = cfg.seed + trial
    rng = np.random.default_rng([seed, 0])
    base = _owner(ctx, seed, trial)
    sc = cfg.scenario

    if sc == "collusion":
        ledger = _share(ctx, base, cfg.h, rng)
        copies = [ledger.released(sp) for sp in ledger.sp_ids]
        truth = [(c, i) for c, sp in enumerate(ledger.sp_ids) for i in ledger.sharing(sp).pattern.indices]
        res = adversary.collusion_attack(copies, ledger.counts(), cfg.w, truth=truth)
        row = {"log10_objective": objective_log10(ledger.counts()),
               "whole_identified": float(res.whole_identified),
               "success_fraction": res.success_fraction}
        row.update(_fraction_hits(res.identified(), len(truth), cfg.fractions))
        return [row]

    if sc == "partial_knowledge":
        total = cfg.total_sharings or cfg.h
        ledger = _share(ctx, base, total, rng)
        chosen = sorted(rng.choice(total, size=cfg.h, replace=False).tolist())
        sps = [ledger.sp_ids[c] for c in chosen]
        copies = [ledger.released(sp) for sp in sps]
        marked = np.zeros((cfg.h, cfg.length), dtype=bool)
        for c, sp in enumerate(sps):
            marked[c, sorted(ledger.sharing(sp).pattern.indices)] = True
        rows = []
        for t in range(total - cfg.h + 1):
            hist = histogram_chain(cfg.length, cfg.w, cfg.h + t)[cfg.h + t]
            rows.append({"t": t, "assumed": cfg.h + t,
                         "log10_probability": adversary.true_hypothesis_log10(copies, marked, hist, t)})
        return rows

    if sc == "correlation":
        ledger = _share(ctx, base, cfg.h, rng)
        sp = ledger.sp_ids[-1]
        copy = ledger.released(sp)
        truth = ledger.sharing(sp).pattern.indices
        res = adversary.correlation_attack(copy, ctx.model, cfg.w, truth=truth, rng_seed=rng.integers(2**63))
        row = {"identified": res.identified(), "success_fraction": res.success_fraction,
               "utility": utility(base, copy)}
        row.update(_fraction_hits(res.identified(), cfg.w, cfg.fractions))
        return [row]

    if sc == "combined":
        ledger = _share(ctx, base, cfg.h, rng)
        copies = [ledger.released(sp) for sp in ledger.sp_ids]
        truths = [ledger.sharing(sp).pattern.indices for sp in ledger.sp_ids]
        res = adversary.combined_attack(copies, ctx.model, ledger.counts(), cfg.w, truths)
        row = {"identified": res.identified(), "correlation_hits": res.info["m"],
               "success_fraction": res.success_fraction}
        row.update(_fraction_hits(res.identified(), cfg.w, cfg.fractions))
        return [row]

    if sc == "partial_share":
        ledger = _share(ctx, base, cfg.h, rng)
        culprit = ledger.sp_ids[int(rng.integers(cfg.h))]
        copy = ledger.released(culprit)
        rows = []
        for f in cfg.fractions:
            idx, vals = adversary.partial_share(copy, f, rng_seed=rng.integers(2**63))
            rep = detector.partial_leak_candidates(dict(zip(idx, vals)), ledger, truth={culprit})
            rows.append({"fraction": f, "entropy_bits": rep.entropy_bits,
                         "precision": rep.precision, "recall": rep.recall})
        return rows

    if sc in ("modification_single", "modification_collusion"):
        ledger = _share(ctx, base, cfg.h, rng)
        phi = 1 if sc == "modification_single" else cfg.phi
        culprits = sorted(ledger.sp_ids[c] for c in rng.choice(cfg.h, size=phi, replace=False))
        pooled = adversary.modify_majority([ledger.released(sp) for sp in culprits])
        count = adversary.noise_count(cfg.pi, cfg.w)
        leak = adversary.add_noise(pooled, count, rng_seed=rng.integers(2**63))
        zalpha = detector.extract_leak_pattern(leak, base)
        phi_hat = cfg.phi_hat or phi
        if phi_hat == 1:
            rep = detector.detect_single(zalpha, ledger, truth=set(culprits))
        else:
            rep = detector.detect_combination(zalpha, ledger, phi_hat, truth=set(culprits))
        return [{"precision": rep.precision, "recall": rep.recall,
                 "utility_loss": 1.0 - utility(pooled, leak),
                 "utility_loss_vs_original": 1.0 - utility(base, leak)}]

    raise ExperimentError(f"unhandled scenario {sc!r}")


def _run_chunk(args) -> list[tuple[int, list[dict]]]:
    cfg_doc, trials = args
    cfg = ExperimentConfig.from_json(cfg_doc)
    ctx = _context(cfg)
    return [(i, _safe_trial(ctx, i)) for i in trials]


def _safe_trial(ctx: _Context, i: int) -> list[dict]:
    try:
        return _trial(ctx, i)
    except Exception as exc:
        raise ExperimentError(f"trial {i} (seed {ctx.config.seed + i}): {type(exc).__name__}: {exc}") from exc


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


@dataclass
class ResultTable:
    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row.get(k)) for k in self.columns})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        reader = csv.DictReader(io.StringIO(text))
        rows = [{k: _parse(v) for k, v in row.items()} for row in reader]
        return cls(list(reader.fieldnames or []), rows)

    def column(self, name: str) -> list:
        return [row.get(name) for row in self.rows]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


PARAMS = ("scenario", "length", "m", "w", "h", "t", "pi", "phi", "phi_hat", "embedding", "trials", "seed")


def run_experiment(config: ExperimentConfig, *, per_trial: bool = False):
    """Run all trials of ``config`` and average every metric.

    Trial ``i`` uses seed ``config.seed + i``.  Rows produced by a trial
    with a grouping key (``fraction`` or ``t``) are averaged per key.
    Returns the aggregate table, plus the per-trial table when asked.
    """
    trials = list(range(config.trials))
    workers = min(_workers(), len(trials))
    doc = config.to_json()
    if workers > 1:
        chunks = [trials[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = [r for chunk in pool.map(_run_chunk, [(doc, c) for c in chunks]) for r in chunk]
    else:
        parts = _run_chunk((doc, trials))
    parts.sort(key=lambda e: e[0])

    params = {k: doc[k] for k in PARAMS}
    params["r"] = config.r
    keyed: dict[tuple, list[dict]] = {}
    trial_rows = []
    for i, rows in parts:
        for row in rows:
            key = tuple((k, row[k]) for k in ("fraction", "t", "assumed") if k in row)
            keyed.setdefault(key, []).append(row)
            trial_rows.append({"trial": i, **params, **row})
    agg_rows = []
    for key, rows in keyed.items():
        out = dict(params)
        out.update(dict(key))
        metrics = [k for k in rows[0] if k not in dict(key)]
        for k in metrics:
            out[k] = float(np.mean([r[k] for r in rows]))
        out["n"] = len(rows)
        agg_rows.append(out)
    agg = ResultTable(_columns(agg_rows, ["r", *PARAMS]), agg_rows)
    if per_trial:
        return agg, ResultTable(_columns(trial_rows, ["trial", "r", *PARAMS]), trial_rows)
    return agg


def _columns(rows, lead) -> list[str]:
    cols = list(lead)
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    return cols


def emit_results(table: ResultTable, csv_path, long_path=None, *, x: str | None = None,
                 y: list[str] | None = None, series: str | None = None) -> None:
    """Write the table as CSV and optionally as long-format ``x,y,series,metric`` rows."""
    csv_path = Path(csv_path)
    try:
        csv_path.write_text(table.to_csv())
    except OSError as exc:
        raise OSError(f"cannot write {csv_path}: {exc.strerror}") from exc
    if long_path is None:
        return
    if x is None or not y:
        raise ValueError("long format needs an x column and at least one y column")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "series", "metric"])
    for row in table.rows:
        for metric in y:
            label = f"{series}={_fmt(row.get(series))}" if series else ""
            writer.writerow([_fmt(row.get(x)), _fmt(row.get(metric)), label, metric])
    try:
        Path(long_path).write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write {long_path}: {exc.strerror}") from exc


def probability_sweep(length: int = 7690, ratios=(0.025, 0.05, 0.1), sharings=(2, 4, 6, 8, 10)) -> ResultTable:
    """log10 whole-watermark probability of iterated allocation over a ratio x sharing grid."""
    rows = []
    for r in ratios:
        w = watermark_length(length, r)
        chain = histogram_chain(length, w, max(sharings))
        for h in sharings:
            rows.append({"r": r, "h": h, "w": w, "log10_objective": objective_log10(chain[h])})
    return ResultTable(["r", "h", "w", "log10_objective"], rows)

