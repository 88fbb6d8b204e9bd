import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqmark.adversary import (add_noise, collusion_attack, collusion_posterior, column_hypotheses,
                               combined_attack, correlation_attack, correlation_scores,
                               fraction_inference_probability, modify_majority, noise_count, observe_column,
                               partial_knowledge_posterior, partial_share, true_hypothesis_log10,
                               whole_watermark_probability)
from seqmark.allocation import allocation_chain, histogram_chain, objective_log10
from seqmark.core import CountHistogram, Sequence, SharingLedger, record_sharing
from seqmark.embedder import CorrelationModel, embed_correlated, embed_uncorrelated, estimate_correlations
from seqmark.harness import generate_synthetic, pair_block_spec

import oracles


def _history(base, w, h, seed):
    ledger = SharingLedger(base)
    for k, alloc in enumerate(allocation_chain(len(base), w, h)):
        _, pattern = embed_uncorrelated(ledger, range(len(base)), alloc, rng_seed=[seed, k], sp_id=f"s{k}")
        record_sharing(ledger, f"s{k}", range(len(base)), pattern)
    return ledger


def _truth(ledger):
    return [(c, i) for c, sp in enumerate(ledger.sp_ids) for i in ledger.sharing(sp).pattern.indices]


def test_collusion_posterior_examples():
    assert collusion_posterior(1, CountHistogram((4, 3, 3, 0))) == (0.5, 0.5)
    assert collusion_posterior(1, CountHistogram((2, 5, 3, 1))) == pytest.approx((5 / 8, 3 / 8))
    assert collusion_posterior(1, CountHistogram((4, 0, 0, 1))) == (0.5, 0.5)
    with pytest.raises(ValueError):
        collusion_posterior(4, CountHistogram((4, 0, 0, 1)))


def test_posterior_matches_simulated_histories():
    # binary data, h = 3: at columns split 1 vs 2, how often is the single copy the watermarked one?
    hist = histogram_chain(12, 3, 3)[3]
    hits = total = 0
    for seed in range(10_000):
        ledger = _history(Sequence(tuple([0] * 12), 2), 3, 3, seed)
        mat = np.array([ledger.released(sp).points for sp in ledger.sp_ids])
        cols = [c for c in range(12) if mat[:, c].sum() in (1, 2)]
        c = cols[seed % len(cols)]
        ones = int(mat[:, c].sum())
        single_value = 1 if ones == 1 else 0
        single_marked = single_value == 1
        hits += single_marked
        total += 1
    p, _ = collusion_posterior(1, hist)
    sigma = math.sqrt(p * (1 - p) / total)
    assert abs(hits / total - p) <= 3 * sigma


def test_partial_posterior_reduces_to_exact_at_t0():
    hist = CountHistogram((10, 4, 2, 6))
    post = partial_knowledge_posterior(1, 3, 0, hist)
    assert post.rows[0][1] == 1.0
    assert post.group_probability() == pytest.approx(collusion_posterior(1, hist)[0])


def test_partial_posterior_symmetric_histogram():
    hist = CountHistogram((3, 5, 5, 3))
    post = partial_knowledge_posterior(1, 2, 1, hist)
    assert all(pa == 0.5 and pb == 0.5 for _, _, pa, pb in post.rows)


def test_partial_posterior_matches_enumeration():
    n = (7, 3, 5, 2)
    post = partial_knowledge_posterior(1, 2, 1, CountHistogram(n))
    want = oracles.partial_joint(n, 1, 2, 1)
    for (u, _, _, _), (ja, jb) in zip(post.rows, post.joint()):
        assert ja == pytest.approx(float(want[(u, "first")]))
        assert jb == pytest.approx(float(want[(u, "second")]))


def test_partial_posterior_degenerate_case():
    post = partial_knowledge_posterior(0, 2, 0, CountHistogram((0, 5, 0)))
    assert post.degenerate
    assert sum(a + b for a, b in post.joint()) == pytest.approx(1.0)


@st.composite
def partial_cases(draw):
    h = draw(st.integers(1, 4))
    t = draw(st.integers(0, 3))
    n = draw(st.lists(st.integers(0, 20), min_size=h + t + 1, max_size=h + t + 1))
    k = draw(st.integers(0, h))
    return k, h, t, CountHistogram(tuple(n))


@settings(max_examples=200, deadline=None)
@given(partial_cases())
def test_partial_joint_weights_sum_to_one(case):
    k, h, t, hist = case
    post = partial_knowledge_posterior(k, h, t, hist)
    assert sum(a + b for a, b in post.joint()) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=2, max_size=6), st.data())
def test_collusion_posterior_sums_to_one(n, data):
    hist = CountHistogram(tuple(n))
    k = data.draw(st.integers(0, hist.h))
    assert sum(collusion_posterior(k, hist)) == pytest.approx(1.0, abs=1e-12)


def test_single_copy_confidence_is_prior():
    base = Sequence(tuple([0, 1, 2] * 10), 3)
    ledger = _history(base, 6, 1, 0)
    res = collusion_attack([ledger.released("s0")], ledger.counts(), 6)
    assert len(res.claims) == 6
    assert all(c == pytest.approx(6 / 30) for c in res.confidence)


def test_identical_column_hypothesis_is_all_or_none():
    hist = CountHistogram((10, 1, 1, 4))
    (obs, p), = column_hypotheses([Sequence((2,), 3)] * 3, hist)
    assert obs.groups == ((0, 1, 2), ())
    assert p == pytest.approx(4 / 14)


def test_three_states_split_into_largest_classes():
    obs = observe_column([1, 1, 0, 2, 1, 0])
    assert obs.groups == ((0, 1, 4), (2, 5))
    assert obs.extra == (3,)


def test_whole_watermark_success_rate_matches_objective():
    for length, w, h in ((8, 2, 2), (100, 5, 4)):
        hist = histogram_chain(length, w, h)[h]
        p = 10 ** objective_log10(hist)
        base = Sequence(tuple([0] * length), 2)
        trials = 10_000
        wins = 0
        ledger = _history(base, w, h, 0)
        copies = [ledger.released(sp) for sp in ledger.sp_ids]
        truth = _truth(ledger)
        for seed in range(trials):
            res = collusion_attack(copies, ledger.counts(), w, truth=truth, rng_seed=seed)
            wins += res.whole_identified
        sigma = math.sqrt(p * (1 - p) / trials)
        assert abs(wins / trials - p) <= 3 * sigma + 1e-12
        assert whole_watermark_probability(histogram_chain(length, w, h)) == objective_log10(hist)


def test_map_attack_success_fraction_bounds():
    ledger = _history(Sequence(tuple([0, 1, 2] * 20), 3), 6, 4, 3)
    copies = [ledger.released(sp) for sp in ledger.sp_ids]
    res = collusion_attack(copies, ledger.counts(), 6, truth=_truth(ledger))
    assert 0.0 <= res.success_fraction <= 1.0
    assert len(res.claims) == 4 * 6


def test_true_hypothesis_probability_equals_objective():
    for seed in range(5):
        ledger = _history(Sequence(tuple([0, 1, 2] * 20), 3), 5, 4, seed)
        copies = [ledger.released(sp) for sp in ledger.sp_ids]
        mask = np.zeros((4, 60), dtype=bool)
        for c, sp in enumerate(ledger.sp_ids):
            mask[c, sorted(ledger.sharing(sp).pattern.indices)] = True
        got = true_hypothesis_log10(copies, mask, ledger.counts())
        assert got == pytest.approx(objective_log10(ledger.counts()), abs=1e-9)


def test_fraction_inference_reductions():
    hist = histogram_chain(60, 6, 3)[3]
    assert fraction_inference_probability(hist, 0.0) == 1.0
    assert fraction_inference_probability(hist, 1.0) == pytest.approx(10 ** objective_log10(hist))
    with pytest.raises(ValueError):
        fraction_inference_probability(hist, 1.5)
    with pytest.raises(ValueError):
        fraction_inference_probability(CountHistogram((10_000, 1)), 0.5)


def test_fraction_inference_exact_vs_monte_carlo():
    hist = histogram_chain(40, 8, 4)[4]
    for f in (0.25, 0.5, 0.75):
        exact = fraction_inference_probability(hist, f)
        trials = 100_000
        mc = fraction_inference_probability(hist, f, method="montecarlo", trials=trials, seed=7)
        sigma = math.sqrt(max(exact * (1 - exact), 1e-12) / trials)
        assert abs(mc - exact) <= 3 * sigma


def test_correlation_scores_empty_model():
    copy = Sequence(tuple([0, 1, 2] * 5), 3)
    empty = CorrelationModel({}, m=3)
    assert correlation_scores(copy, empty).tolist() == [0.0] * 15
    res = correlation_attack(copy, empty, 4, truth={0, 1}, rng_seed=0)
    assert res.info["positive"] == 0
    assert len(res.claims) == 4
    assert all(c == pytest.approx(4 / 15) for c in res.confidence)


def test_correlation_score_clamped():
    model = CorrelationModel({(0, 1, 1, 0): 0.95, (0, 0, 2, 0): 0.99}, tau=0.9, m=2)
    # evidence for the current state outweighs evidence against it
    assert correlation_scores(Sequence((0, 0, 0), 2), model)[0] == 0.0
    assert correlation_scores(Sequence((0, 0, 1), 2), model)[0] == pytest.approx(0.95)


def test_correlated_embedding_lowers_attack_scores():
    spec = pair_block_spec(60, 3, 0.96)
    model = estimate_correlations(generate_synthetic(60, 3, 1000, spec, seed=1), 0.9)
    totals = {"uncorrelated": 0.0, "correlated": 0.0}
    for seed in range(100):
        base = generate_synthetic(60, 3, 1, spec, seed=[2, seed])[0]
        ledger = SharingLedger(base)
        alloc = allocation_chain(60, 12, 1)[0]
        for kind in totals:
            if kind == "uncorrelated":
                out, pattern = embed_uncorrelated(ledger, range(60), alloc, rng_seed=seed)
            else:
                out, pattern = embed_correlated(ledger, range(60), alloc, model, 12)
            scores = correlation_scores(out, model)
            totals[kind] += sum(scores[i] for i in pattern.indices)
    assert totals["correlated"] <= totals["uncorrelated"]


def test_combined_with_empty_model_reduces_to_collusion():
    ledger = _history(Sequence(tuple([0, 1, 2] * 10), 3), 5, 3, 1)
    copies = [ledger.released(sp) for sp in ledger.sp_ids]
    truths = [ledger.sharing(sp).pattern.indices for sp in ledger.sp_ids]
    res = combined_attack(copies, CorrelationModel({}, m=3), ledger.counts(), 5, truths)
    coll = collusion_attack(copies, ledger.counts(), 5, budget=3 * 30)
    want = [cl for cl in coll.claims if cl[0] == 0][:5]
    assert res.claims == want
    assert res.info["m"] == 0


def test_combined_detection_count_bounded_by_w():
    spec = pair_block_spec(40, 3, 0.96)
    model = estimate_correlations(generate_synthetic(40, 3, 500, spec, seed=3), 0.9)
    base = generate_synthetic(40, 3, 1, spec, seed=4)[0]
    ledger = _history(base, 10, 3, 0)
    copies = [ledger.released(sp) for sp in ledger.sp_ids]
    truths = [ledger.sharing(sp).pattern.indices for sp in ledger.sp_ids]
    res = combined_attack(copies, model, ledger.counts(), 10, truths)
    assert res.info["m"] <= 10
    assert len(res.claims) <= 10


def test_majority_examples():
    same = [Sequence((0, 1, 2), 3)] * 3
    assert modify_majority(same) == same[0]
    assert modify_majority([Sequence((0,), 2), Sequence((0,), 2), Sequence((1,), 2)]).points == (0,)
    assert modify_majority([Sequence((0,), 2), Sequence((1,), 2)]).points == (0,)
    assert modify_majority([Sequence((1,), 2), Sequence((0,), 2)]).points == (1,)


def test_noise_examples():
    seq = Sequence(tuple([0, 1, 2] * 100), 3)
    assert add_noise(seq, 0, rng_seed=1) == seq
    noisy = add_noise(seq, 57, rng_seed=1)
    assert sum(a != b for a, b in zip(seq.points, noisy.points)) == 57
    with pytest.raises(ValueError):
        add_noise(seq, 301)
    assert noise_count(13, 385) / 7690 == pytest.approx(0.65, abs=1e-3)


def test_partial_share_examples():
    seq = Sequence(tuple([0, 1, 2] * 2564)[:7690], 3)
    idx, vals = partial_share(seq, 1.0, rng_seed=0)
    assert idx == list(range(7690)) and vals == list(seq.points)
    idx, _ = partial_share(seq, 0.33, rng_seed=0)
    assert len(idx) == math.floor(0.33 * 7690)
    a, _ = partial_share(seq, 0.5, rng_seed=1)
    b, _ = partial_share(seq, 0.5, rng_seed=2)
    assert a != b
    with pytest.raises(ValueError):
        partial_share(seq, 0.0)


def test_attacks_deterministic_given_seed():
    ledger = _history(Sequence(tuple([0, 1, 2] * 10), 3), 5, 3, 1)
    copies = [ledger.released(sp) for sp in ledger.sp_ids]
    a = collusion_attack(copies, ledger.counts(), 5, rng_seed=4)
    b = collusion_attack(copies, ledger.counts(), 5, rng_seed=4)
    assert a.claims == b.claims and a.confidence == b.confidence


def test_exact_fraction_probability_is_rational_sum():
    # two columns in bucket 1 of a 1-sharing history: success needs both
    hist = CountHistogram((2, 2))
    q = Fraction(2, 4)
    assert fraction_inference_probability(hist, 1.0) == pytest.approx(float(q ** 4))
    assert fraction_inference_probability(hist, 0.5) == pytest.approx(float(1 - (1 - q) ** 2))
