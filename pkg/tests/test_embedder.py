import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqmark.allocation import solve_allocation
from seqmark.core import Sequence, SharingLedger, counts, record_sharing
from seqmark.embedder import (CorrelationModel, EmbeddingError, InsufficientWatermarkablePoints, default_target,
                              embed_correlated, embed_uncorrelated, estimate_correlations, presence_probability,
                              state_support)
from seqmark.harness import generate_synthetic, pair_block_spec

import oracles


def _share_many(base, w, h, seed=0):
    ledger = SharingLedger(base)
    for k in range(h):
        alloc = solve_allocation(counts(ledger), w)
        _, pattern = embed_uncorrelated(ledger, range(len(base)), alloc, rng_seed=seed + k, sp_id=f"s{k}")
        record_sharing(ledger, f"s{k}", range(len(base)), pattern)
    return ledger


def test_default_target_rule():
    assert [default_target(s, 2) for s in (0, 1)] == [1, 0]
    assert [default_target(s, 3) for s in (0, 1, 2)] == [1, 2, 1]


def test_model_validates_entries():
    with pytest.raises(ValueError):
        CorrelationModel({(0, 1, 1, 1): 0.5}, tau=0.9)
    with pytest.raises(ValueError):
        CorrelationModel({(0, 1, 0, 1): 0.95}, tau=0.9)


def test_model_json_round_trip(tmp_path):
    model = CorrelationModel({(0, 1, 2, 1): 0.95, (2, 0, 0, 0): 0.93}, tau=0.9, m=3)
    model.save(tmp_path / "m.json")
    back = CorrelationModel.load(tmp_path / "m.json")
    assert back.entries == model.entries and back.tau == 0.9 and back.m == 3


def test_estimate_perfect_copy_and_threshold():
    rng = np.random.default_rng(0)
    rows = rng.integers(0, 3, size=(50, 8))
    rows[:, 2] = rows[:, 5]
    corpus = [Sequence(tuple(r.tolist()), 3) for r in rows]
    model = estimate_correlations(corpus, 0.9)
    for a in set(rows[:, 5].tolist()):
        assert model.entries[(2, a, 5, a)] == 1.0
        assert model.entries[(5, a, 2, a)] == 1.0
    assert len(estimate_correlations(corpus, 1.1)) == 0


def test_estimate_rejects_bad_corpus():
    with pytest.raises(ValueError):
        estimate_correlations([Sequence((0, 1), 2)], 0.9)
    with pytest.raises(ValueError):
        estimate_correlations([Sequence((0, 1), 2), Sequence((0,), 2)], 0.9)


def test_estimate_matches_frequency_count():
    corpus = generate_synthetic(100, 3, 99, pair_block_spec(100, 3, 0.97), seed=5)
    rows = [c.points for c in corpus]
    model = estimate_correlations(corpus, 0.9)
    keys = sorted(model.entries)
    rng = np.random.default_rng(1)
    for k in rng.choice(len(keys), size=10, replace=False):
        i, a, j, b = keys[k]
        assert model.entries[(i, a, j, b)] == pytest.approx(oracles.conditional_counts(rows, i, a, j, b))
    # everything above the threshold is present
    for i, a, j, b in [(1, 0, 0, 0), (0, 2, 1, 2), (3, 1, 2, 1)]:
        freq = oracles.conditional_counts(rows, i, a, j, b)
        assert ((i, a, j, b) in model.entries) == (freq > 0.9)


def test_presence_examples():
    seq = Sequence((0, 1, 1), 2)
    empty = CorrelationModel({}, tau=0.9, m=2)
    assert presence_probability(seq, 0, 1, empty) == 1.0
    model = CorrelationModel({(0, 1, 1, 1): 0.95, (0, 1, 2, 1): 0.92}, tau=0.9, m=2)
    assert presence_probability(seq, 0, 1, model) == pytest.approx(0.874)


@st.composite
def models(draw):
    length = draw(st.integers(2, 8))
    m = draw(st.integers(2, 3))
    points = draw(st.lists(st.integers(0, m - 1), min_size=length, max_size=length))
    keys = draw(st.lists(st.tuples(st.integers(0, length - 1), st.integers(0, m - 1),
                                   st.integers(0, length - 1), st.integers(0, m - 1)), max_size=20))
    entries = {}
    for i, a, j, b in keys:
        if i != j:
            entries[(i, a, j, b)] = draw(st.floats(0.901, 1.0))
    return Sequence(tuple(points), m), CorrelationModel(entries, tau=0.9, m=m)


@settings(max_examples=150, deadline=None)
@given(models(), st.data())
def test_presence_matches_full_scan(case, data):
    seq, model = case
    i = data.draw(st.integers(0, len(seq) - 1))
    s = data.draw(st.integers(0, seq.m - 1))
    want = oracles.presence_scan(seq.points, i, s, model.entries, seq.m)
    assert presence_probability(seq, i, s, model) == pytest.approx(want)
    assert 0.0 <= presence_probability(seq, i, s, model) <= 1.0


def test_uncorrelated_flip_changes_exactly_w():
    base = Sequence(tuple([0, 1] * 20), 2)
    ledger = SharingLedger(base)
    alloc = solve_allocation(counts(ledger), 7)
    out, pattern = embed_uncorrelated(ledger, range(40), alloc, rng_seed=9)
    assert sum(a != b for a, b in zip(base.points, out.points)) == 7
    assert pattern.w == 7


def test_uncorrelated_recount_and_determinism():
    rng = np.random.default_rng(2)
    base = Sequence(tuple(rng.integers(0, 3, 60).tolist()), 3)
    ledger = _share_many(base, 6, 3)
    alloc = solve_allocation(counts(ledger), 6)
    out1, p1 = embed_uncorrelated(ledger, range(60), alloc, rng_seed=11, sp_id="new")
    out2, p2 = embed_uncorrelated(ledger, range(60), alloc, rng_seed=11, sp_id="new")
    assert p1 == p2 and out1 == out2
    record_sharing(ledger, "new", range(60), p1)
    assert counts(ledger) == alloc.next_counts


def test_uncorrelated_rejects_identity_rule():
    ledger = SharingLedger(Sequence((0, 1, 0), 2))
    alloc = solve_allocation(counts(ledger), 1)
    with pytest.raises(EmbeddingError, match="keeps"):
        embed_uncorrelated(ledger, range(3), alloc, target_rule=lambda s, m: s, rng_seed=0)


def test_correlated_toy_example():
    # x_0 wants 1 (supported by x_2); its change drags x_1, whose change drags x_4 but not x_3
    base = Sequence((0, 0, 1, 1, 0), 2)
    model = CorrelationModel({
        (0, 1, 2, 1): 0.95, (1, 1, 0, 1): 0.95, (2, 1, 0, 1): 0.95, (3, 1, 1, 1): 0.95, (4, 1, 1, 1): 0.95,
    }, tau=0.9, m=2)
    ledger = SharingLedger(base)
    out, pattern = embed_correlated(ledger, range(5), [3], model, 3)
    assert pattern.indices == {0, 1, 4}
    assert out.points == (1, 1, 1, 1, 1)


def test_correlated_empty_model_uses_fallback():
    base = Sequence(tuple([0, 1, 2] * 10), 3)
    ledger = SharingLedger(base)
    alloc = solve_allocation(counts(ledger), 8)
    out, pattern = embed_correlated(ledger, range(30), alloc, CorrelationModel({}, m=3), 8)
    assert pattern.w == 8
    assert sum(a != b for a, b in zip(base.points, out.points)) == 8


def test_correlated_bucket_accounting_and_determinism():
    corpus = generate_synthetic(40, 3, 400, pair_block_spec(40, 3, 0.97), seed=1)
    model = estimate_correlations(corpus, 0.9)
    base = generate_synthetic(40, 3, 1, pair_block_spec(40, 3, 0.97), seed=99)[0]
    ledger = SharingLedger(base)
    for k in range(3):
        alloc = solve_allocation(counts(ledger), 6)
        out, pattern = embed_correlated(ledger, range(40), alloc, model, 6, sp_id=f"s{k}")
        again = embed_correlated(ledger, range(40), alloc, model, 6, sp_id=f"s{k}")
        assert again == (out, pattern)
        assert pattern.w == 6
        assert all(a != b for _, a, b in pattern.entries)
        record_sharing(ledger, f"s{k}", range(40), pattern)
        assert counts(ledger) == alloc.next_counts


def test_correlated_keeps_pairs_consistent():
    spec = pair_block_spec(40, 3, 1.0)
    base = generate_synthetic(40, 3, 1, spec, seed=4)[0]
    model = CorrelationModel({(i, a, j, b): p for i, a, j, b, p in spec}
                             | {(j, b, i, a): p for i, a, j, b, p in spec}, tau=0.9, m=3)
    ledger = SharingLedger(base)
    out, pattern = embed_correlated(ledger, range(40), [10], model, 10)
    below = [j for j in range(40)
             if state_support(out, j, model)[out[j]] < state_support(out, j, model).max()]
    assert below == []
    assert pattern.w == 10


def test_correlated_insufficient_points():
    base = Sequence((0, 1), 2)
    ledger = SharingLedger(base)
    with pytest.raises(InsufficientWatermarkablePoints):
        embed_correlated(ledger, [0], [2], CorrelationModel({}, m=2), 2)


def test_correlated_budget_must_sum_to_w():
    ledger = SharingLedger(Sequence((0, 1, 0), 2))
    with pytest.raises(EmbeddingError):
        embed_correlated(ledger, range(3), [2], CorrelationModel({}, m=2), 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 5))
def test_both_embedders_change_exactly_w(seed, h, w):
    rng = np.random.default_rng(seed)
    base = Sequence(tuple(rng.integers(0, 3, 30).tolist()), 3)
    ledger = _share_many(base, w, h - 1, seed)
    alloc = solve_allocation(counts(ledger), w)
    for out, pattern in (embed_uncorrelated(ledger, range(30), alloc, rng_seed=seed),
                         embed_correlated(ledger, range(30), alloc, CorrelationModel({}, m=3), w)):
        assert pattern.w == w
        assert sum(a != b for a, b in zip(base.points, out.points)) == w
