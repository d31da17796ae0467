import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rtdlab.analysis import (
    ExactLossEvaluator, PositionSet, Scheme, accuracy_table, canonical_batches, correlation_from_pairs,
    detection_accuracy, detection_accuracy_from, estimation_correlation, fit_sampling_logits,
    histogram_of_maxima, maxprob_histogram, sampled_original_rate, synthetic_variance_report, variance_report,
)
from rtdlab.errors import ConfigError, DataError, UndefinedCorrelation
from rtdlab.sampling import kl_divergence, optimal_ps_oracle

MASK_FRAC, NGRAM_MAX = 0.15, 3


@pytest.fixture
def heldout_sequences():
    rng = np.random.default_rng(21)
    return [rng.integers(5, 40, size=int(rng.integers(8, 16))) for _ in range(10)]


@pytest.fixture
def batches(heldout_sequences):
    return canonical_batches(heldout_sequences, 4, 24)


def test_histogram_bins_and_closed_top_edge():
    dists = np.array([[1.0, 0.0], [0.55, 0.45], [0.5, 0.5], [0.95, 0.05]])
    report = histogram_of_maxima(dists)
    assert report.counts.sum() == 4
    assert report.counts[-1] == 2
    assert report.counts[5] == 2
    frame = report.frame()
    assert frame['bin'].iloc[-1] == '[0.9,1.0]'
    assert frame['fraction'].sum() == pytest.approx(1.0)


def test_canonical_order_ignores_arrival_order(heldout_sequences):
    forward = canonical_batches(heldout_sequences, 4, 24)
    backward = canonical_batches(heldout_sequences[::-1], 4, 24)
    for a, b in zip(forward, backward):
        assert_array_equal(a.ids, b.ids)


def test_empty_heldout_is_a_data_error():
    with pytest.raises(DataError):
        canonical_batches([], 4, 24)


def test_histograms_cover_every_masked_position(micro_config, make_pair, batches):
    pair = make_pair(micro_config)
    pg = maxprob_histogram(pair, batches, Scheme.PG, MASK_FRAC, NGRAM_MAX, seed=0)
    ps = maxprob_histogram(pair, batches, Scheme.PS, MASK_FRAC, NGRAM_MAX, seed=0)
    assert pg.n == ps.n > 0
    assert pg.fractions.sum() == pytest.approx(1.0)
    assert_array_equal(maxprob_histogram(pair, batches, 'pg', MASK_FRAC, NGRAM_MAX, seed=0).counts, pg.counts)


def test_baseline_has_no_ps_histogram(make_config, make_pair, batches):
    pair = make_pair(make_config('none'))
    with pytest.raises(ConfigError):
        maxprob_histogram(pair, batches, Scheme.PS, MASK_FRAC, NGRAM_MAX)


def test_perfect_and_inverted_correlation():
    x = np.array([0.1, 0.5, 0.9, 1.3, 0.2, 0.7])
    flags = np.array([True, True, True, False, False, False])
    assert_allclose(list(correlation_from_pairs(x, 2 * x + 1, flags).coefficients.values()), 1.0)
    assert_allclose(list(correlation_from_pairs(x, -x, flags).coefficients.values()), -1.0)


def test_correlation_is_invariant_to_positive_affine_maps(rng):
    x = rng.normal(size=40)
    y = x + rng.normal(scale=0.5, size=40)
    flags = rng.random(40) < 0.5
    base = correlation_from_pairs(x, y, flags).coefficients
    moved = correlation_from_pairs(3 * x + 2, 0.5 * y - 4, flags).coefficients
    for group in base:
        assert moved[group] == pytest.approx(base[group], abs=1e-12)


def test_spearman_sees_monotone_relations(rng):
    x = rng.uniform(0.1, 3.0, size=30)
    flags = np.arange(30) % 2 == 0
    report = correlation_from_pairs(x, np.exp(x), flags, method='spearman')
    assert_allclose(list(report.coefficients.values()), 1.0)
    assert report.frame()['method'].unique().tolist() == ['spearman']


def test_undefined_correlation_is_reported():
    x = np.array([0.1, 0.5, 0.9])
    with pytest.raises(UndefinedCorrelation):
        correlation_from_pairs(x, x, np.array([True, True, True]))
    with pytest.raises(UndefinedCorrelation):
        correlation_from_pairs(x, np.ones(3), np.array([True, False, True]))


def test_correlation_needs_an_hploss_checkpoint(make_config, make_pair, batches):
    pair = make_pair(make_config('hp_dist'))
    with pytest.raises(ConfigError):
        estimation_correlation(pair, batches, MASK_FRAC, NGRAM_MAX)


def test_estimation_correlation_is_permutation_invariant(micro_config, make_pair):
    pair = make_pair(micro_config)
    # a generator that proposes token 7 about half the time, on all-7 text, yields both groups
    bias = np.zeros(pair.vocab_size)
    bias[7] = 3.5
    pair.generator.mlm_bias.data = bias
    sequences = [np.full(n, 7) for n in range(12, 22) for _ in range(2)]
    forward = canonical_batches(sequences, 4, 24)
    shuffled = canonical_batches(sequences[::-1], 4, 24)
    first = estimation_correlation(pair, forward, MASK_FRAC, NGRAM_MAX, seed=3)
    second = estimation_correlation(pair, shuffled, MASK_FRAC, NGRAM_MAX, seed=3)
    assert first.coefficients == second.coefficients
    assert first.counts['original'] >= 2 and first.counts['replaced'] >= 2
    assert all(-1.0 <= c <= 1.0 for c in first.coefficients.values())


def test_detection_accuracy_from_thresholds_at_one_half():
    probs = np.array([0.9, 0.5, 0.2, 0.4])
    labels = np.array([True, False, False, True])
    assert detection_accuracy_from(probs, labels, np.ones(4, dtype=bool)) == 0.5
    assert detection_accuracy_from(probs, labels, np.array([True, False, True, False])) == 1.0


def test_accuracy_table_shapes(micro_config, make_config, make_pair, batches):
    table = accuracy_table(make_pair(micro_config), batches, MASK_FRAC, NGRAM_MAX, seed=0, step=5)
    assert list(table.columns) == ['step', 'scheme', 'position_set', 'accuracy']
    assert len(table) == 4 and table['accuracy'].between(0, 1).all()
    baseline = accuracy_table(make_pair(make_config('none')), batches, MASK_FRAC, NGRAM_MAX)
    assert baseline['scheme'].unique().tolist() == ['pg'] and len(baseline) == 2


def test_detection_accuracy_is_seeded(micro_config, make_pair, batches):
    pair = make_pair(micro_config)
    runs = {detection_accuracy(pair, batches, Scheme.PS, PositionSet.MASKED, MASK_FRAC, NGRAM_MAX, seed=4)
            for _ in range(2)}
    assert len(runs) == 1


def test_exact_loss_evaluator_scores_every_candidate(micro_config, make_pair):
    pair = make_pair(micro_config)
    evaluator = ExactLossEvaluator(pair)
    sequence = np.arange(5, 17)
    losses = evaluator(sequence, 3, 8)
    assert losses.shape == (pair.vocab_size,)
    assert np.all(losses > 0)
    assert evaluator(sequence, 3, 8) is losses


def test_exact_loss_evaluator_refuses_large_vocabularies(micro_config, make_pair):
    with pytest.raises(ConfigError):
        ExactLossEvaluator(make_pair(micro_config, vocab_size=100))


def test_variance_report_oracle_column_is_zero(micro_config, make_pair, batches):
    pair = make_pair(micro_config)
    frame = variance_report(pair, batches[:1], n_mc=2000, mask_frac=MASK_FRAC, ngram_max=NGRAM_MAX, max_positions=5)
    assert 0 < len(frame) <= 5
    assert (frame['var_ps_oracle'].abs() < 1e-9).all()
    assert (frame['var_pg'] >= 0).all()


def test_synthetic_report_example():
    report = synthetic_variance_report([0.5, 0.3, 0.2], [0.1, 1.0, 2.0], n_mc=20000)
    assert report.z == pytest.approx(0.75)
    assert report.var_pg == pytest.approx(0.5425)
    assert abs(report.var_oracle) < 1e-12
    assert report.mc_var_oracle < 1e-20
    assert_allclose(report.oracle, [0.0667, 0.4, 0.5333], atol=1e-4)


def test_synthetic_report_uniform_loss():
    report = synthetic_variance_report([0.5, 0.3, 0.2], [1.0, 1.0, 1.0], n_mc=1000)
    assert_allclose(report.oracle, [0.5, 0.3, 0.2])
    assert report.var_pg == pytest.approx(0.0, abs=1e-12)


def test_synthetic_report_rejects_mismatched_vectors():
    with pytest.raises(ConfigError):
        synthetic_variance_report([0.5, 0.5], [1.0, 2.0, 3.0], n_mc=100)


def test_fitted_logits_recover_the_oracle():
    p_g = np.array([0.4, 0.25, 0.15, 0.12, 0.08])
    l_d = np.array([0.2, 1.5, 0.7, 3.0, 0.05])
    fit = fit_sampling_logits(p_g, l_d, steps=3000)
    assert fit.kl < 1e-3
    assert_allclose(fit.oracle, optimal_ps_oracle(p_g, l_d))
    assert fit.losses[-1] < fit.losses[0]
    assert kl_divergence(fit.oracle, fit.learned) == pytest.approx(fit.kl)


def test_fit_rejects_a_flat_objective():
    with pytest.raises(ConfigError):
        fit_sampling_logits([0.5, 0.5], [0.0, 0.0], steps=10)


def test_original_rate_counts_tokens_put_back(micro_config, make_config, make_pair, batches):
    pair = make_pair(micro_config)
    bias = np.zeros(pair.vocab_size)
    bias[7] = 50.0
    pair.generator.mlm_bias.data = bias
    sevens = canonical_batches([np.full(n, 7) for n in range(12, 20)], 4, 24)
    assert sampled_original_rate(pair, sevens, Scheme.PG, MASK_FRAC, NGRAM_MAX) == 1.0
    rate = sampled_original_rate(pair, batches, Scheme.PS, MASK_FRAC, NGRAM_MAX, seed=2)
    assert 0.0 <= rate <= 1.0
    assert sampled_original_rate(pair, batches, Scheme.PS, MASK_FRAC, NGRAM_MAX, seed=2) == rate
    with pytest.raises(ConfigError):
        sampled_original_rate(make_pair(make_config('none')), batches, Scheme.PS, MASK_FRAC, NGRAM_MAX)
