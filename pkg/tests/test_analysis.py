import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats as sps

from oracles import bin_loop, bin_table_loop, mean_abs_weights_loop, sparseness_loop
from vonebio.analysis import (
    DEFAULT_NX_EDGES,
    DEFAULT_SF_EDGES,
    CorrelationResult,
    ResponseAccumulator,
    ResponseStats,
    Variant,
    average_tables,
    betainc_reg,
    bin_by_response,
    bin_by_rf,
    bin_index,
    compare_variants,
    downstream_impact,
    mean_abs_downstream_weights,
    pearson,
    read_correlations_csv,
    response_edges,
    response_stats,
    sparseness,
    write_report_tables,
)
from vonebio.gfb import CellType, ChannelDescriptor, GaborParams
from vonebio.sampling import Regime, SamplerConfig, load_distribution_table, sample

# --- sparseness -------------------------------------------------------------


def test_sparseness_reference_values():
    assert sparseness(np.full(7, 3.0)) == 0.0
    assert sparseness(np.eye(9)[4]) == 1.0
    assert abs(sparseness(np.array([1.0, 1.0, 0.0, 0.0])) - 2 / 3) <= 1e-12


def test_silent_unit_is_zero():
    assert sparseness(np.zeros(5)) == 0.0


def test_sparseness_needs_two_stimuli():
    with pytest.raises(ValueError, match="at least 2"):
        sparseness(np.ones(1))


@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 1e6)))
@settings(max_examples=300, deadline=None)
def test_sparseness_bounds_and_oracle(a):
    s = float(sparseness(a))
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(min(max(sparseness_loop(list(a)), 0.0), 1.0), abs=1e-9)


@given(st.integers(2, 30), st.integers(0, 29), st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_one_hot_is_one(b, k, v):
    a = np.zeros(b)
    a[k % b] = v
    assert sparseness(a) == pytest.approx(1.0, abs=1e-12)


@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(0.01, 100)), st.floats(0.01, 100))
@settings(max_examples=100, deadline=None)
def test_sparseness_scale_invariant(a, c):
    assert sparseness(a * c) == pytest.approx(sparseness(a), abs=1e-9)


def test_sparseness_random_sweep():
    a = np.random.default_rng(0).exponential(size=(50, 10_000)) * (np.random.default_rng(1).random((50, 10_000)) > 0.5)
    s = sparseness(a, axis=0)
    assert s.shape == (10_000,) and (s >= 0).all() and (s <= 1).all()


def test_response_stats_per_channel():
    rng = np.random.default_rng(0)
    acts = rng.exponential(size=(20, 3, 4, 4))
    st_ = response_stats(acts)
    np.testing.assert_allclose(st_.mean_activation, acts.mean(axis=(0, 2, 3)), rtol=1e-12)
    unit = np.array([[sparseness_loop(list(acts[:, c, i, j])) for i in range(4) for j in range(4)] for c in range(3)])
    np.testing.assert_allclose(st_.sparseness, unit.mean(1), atol=1e-12)
    assert st_.n_images == 20


def test_streaming_equals_batch():
    acts = np.random.default_rng(1).exponential(size=(30, 4, 3, 3))
    a = response_stats(acts)
    b = response_stats(iter([acts[:7], acts[7:19], acts[19:]]))
    np.testing.assert_allclose(a.mean_activation, b.mean_activation, rtol=1e-12)
    np.testing.assert_allclose(a.sparseness, b.sparseness, rtol=1e-12)


def test_accumulator_shape_guard():
    acc = ResponseAccumulator()
    acc.update(np.ones((2, 3, 4, 4)))
    with pytest.raises(ValueError, match="differs"):
        acc.update(np.ones((2, 3, 5, 5)))
    with pytest.raises(ValueError):
        response_stats(np.ones((1, 3)))


# --- weights and impact -------------------------------------------------------


def test_mean_abs_weights_examples():
    np.testing.assert_array_equal(mean_abs_downstream_weights(np.full((64, 512), -0.5)), np.full(512, 0.5))
    w = np.random.default_rng(0).standard_normal((64, 512))
    w[:, 7] = 0
    assert mean_abs_downstream_weights(w)[7] == 0


def test_mean_abs_weights_oracle():
    w = np.random.default_rng(2).standard_normal((64, 40))
    np.testing.assert_allclose(mean_abs_downstream_weights(w), mean_abs_weights_loop(w), atol=1e-7)
    np.testing.assert_allclose(mean_abs_downstream_weights(w[:, :, None, None]), mean_abs_weights_loop(w), atol=1e-7)


def test_mean_abs_weights_shape_errors():
    with pytest.raises(ValueError):
        mean_abs_downstream_weights(np.zeros(5))
    with pytest.raises(ValueError, match="1x1"):
        mean_abs_downstream_weights(np.zeros((4, 4, 3, 3)))


def test_impact_examples():
    assert downstream_impact(10, 0.5, 0.2) == pytest.approx(1.0)
    assert downstream_impact(0, float("nan"), float("nan")) == 0.0
    assert downstream_impact(0, 3.0, 2.0) == 0.0


# --- binning -----------------------------------------------------------------


def test_bin_index_convention():
    e = [0.0, 1.0, 2.0]
    np.testing.assert_array_equal(bin_index([0.0, 0.999, 1.0, 2.0], e), [0, 0, 1, 1])
    with pytest.raises(ValueError, match="outside"):
        bin_index([2.5], e)
    with pytest.raises(ValueError, match="increasing"):
        bin_index([0.5], [0.0, 1.0, 1.0])


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(0.5, 11.3)))
@settings(max_examples=100, deadline=None)
def test_bin_index_matches_linear_scan(v):
    np.testing.assert_array_equal(bin_index(v, DEFAULT_SF_EDGES), bin_loop(v, DEFAULT_SF_EDGES))


def test_default_edges():
    assert len(DEFAULT_SF_EDGES) == 6 and len(DEFAULT_NX_EDGES) == 4
    assert DEFAULT_SF_EDGES[0] == 0.5 and DEFAULT_SF_EDGES[-1] == pytest.approx(11.3)
    np.testing.assert_allclose(np.diff(np.log(DEFAULT_SF_EDGES)), math.log(11.3 / 0.5) / 5)


def _random_variant(regime, seed, n_s=256, n_c=256):
    table = load_distribution_table() if regime is Regime.BIOLOGICAL else None
    descs = sample(SamplerConfig(regime, n_s, n_c, seed, table))
    rng = np.random.default_rng(seed + 100)
    n = len(descs)
    st_ = ResponseStats(rng.exponential(size=n), rng.random(n), 1000)
    return Variant(descs, st_, rng.random(n))


def test_single_channel_rf_bin():
    d = ChannelDescriptor(CellType.SIMPLE, GaborParams(0, 0.6, 0, 0.15, 0.5), 0)
    t = bin_by_rf([d], ResponseStats(np.array([1.0]), np.array([0.5])), np.array([0.2]))
    assert t.count[0, 0, 0] == 1 and t.count.sum() == 1
    assert t.shape == (2, 5, 3) and t.n_cells == 30


def test_rf_table_matches_oracle():
    v = _random_variant(Regime.UNIFORM, 3)
    t = bin_by_rf(v.descriptors, v.stats, v.mean_abs_weight)
    assert t.count.sum() == 512
    ct = [int(d.cell_type) for d in v.descriptors]
    i0 = bin_loop([d.params.sf for d in v.descriptors], DEFAULT_SF_EDGES)
    i1 = bin_loop([d.params.nx for d in v.descriptors], DEFAULT_NX_EDGES)
    count, means, impact = bin_table_loop(ct, i0, i1, t.shape, v.stats.mean_activation, v.stats.sparseness,
                                          v.mean_abs_weight)
    np.testing.assert_array_equal(t.count, count)
    for got, want in ((t.mean_activation, means["act"]), (t.mean_sparseness, means["sp"]),
                      (t.mean_abs_weight, means["w"]), (t.impact, impact)):
        np.testing.assert_allclose(got, want, atol=1e-7, equal_nan=True)
    # each channel lands in exactly one cell
    assert np.bincount(t.assignment, minlength=30).sum() == 512


def test_response_table_matches_oracle():
    v = _random_variant(Regime.UNIFORM, 4)
    ae, se = response_edges([v.stats])
    assert len(ae) == 5 and len(se) == 5
    t = bin_by_response(v.descriptors, v.stats, v.mean_abs_weight, ae, se)
    assert t.shape == (2, 4, 4) and t.count.sum() == 512
    ct = [int(d.cell_type) for d in v.descriptors]
    count, means, impact = bin_table_loop(ct, bin_loop(v.stats.mean_activation, ae), bin_loop(v.stats.sparseness, se),
                                          t.shape, v.stats.mean_activation, v.stats.sparseness, v.mean_abs_weight)
    np.testing.assert_array_equal(t.count, count)
    np.testing.assert_allclose(t.impact, impact, atol=1e-7)


def test_all_equal_activations_collapse():
    n = 10
    s = ResponseStats(np.full(n, 0.3), np.linspace(0, 1, n))
    ae, se = response_edges([s])
    t = bin_by_response([0] * 5 + [1] * 5, s, np.ones(n), ae, se)
    assert t.shape[1] == 1 and t.count.sum() == n


def test_impact_zero_on_empty_bins_and_order_invariant():
    v = _random_variant(Regime.BIOLOGICAL, 0)
    t = bin_by_rf(v.descriptors, v.stats, v.mean_abs_weight)
    assert (t.count == 0).any()
    assert (t.impact[t.count == 0] == 0).all()
    assert np.isnan(t.mean_activation[t.count == 0]).all()
    perm = np.random.default_rng(0).permutation(512)
    tp = bin_by_rf([v.descriptors[i] for i in perm], ResponseStats(v.stats.mean_activation[perm],
                   v.stats.sparseness[perm]), v.mean_abs_weight[perm])
    np.testing.assert_allclose(tp.impact, t.impact, rtol=1e-12)


def test_bio_bank_lacks_high_sf_low_nx():
    for seed in range(3):
        v = _random_variant(Regime.BIOLOGICAL, seed)
        t = bin_by_rf(v.descriptors, v.stats, v.mean_abs_weight)
        assert (t.count[:, -1, 0] == 0).all()


def test_length_mismatch():
    v = _random_variant(Regime.UNIFORM, 0, 2, 2)
    with pytest.raises(ValueError, match="mismatch"):
        bin_by_rf(v.descriptors, v.stats, v.mean_abs_weight[:3])


# --- Pearson ------------------------------------------------------------------


def test_perfect_correlations():
    c = pearson([1, 2, 3], [2, 4, 6])
    assert c.r == 1.0 and c.p == 0.0 and c.n == 3
    assert pearson([1, 2, 3, 4], [-1, -2, -3, -4]).r == -1.0


def test_pearson_matches_scipy():
    rng = np.random.default_rng(0)
    for n in (3, 4, 5, 8, 20, 30, 200):
        for _ in range(3):
            x = rng.standard_normal(n)
            y = 0.4 * x + rng.standard_normal(n)
            c = pearson(x, y)
            ref = sps.pearsonr(x, y)
            assert abs(c.r - ref.statistic) <= 1e-9
            assert abs(c.p - ref.pvalue) <= 1e-6


def test_betainc_against_scipy():
    from scipy.special import betainc

    for a, b, x in [(0.5, 0.5, 0.3), (1.5, 0.5, 0.9), (10, 0.5, 0.99), (100, 0.5, 0.5), (2.0, 3.0, 0.01)]:
        assert betainc_reg(a, b, x) == pytest.approx(betainc(a, b, x), abs=1e-12)


@given(arrays(np.float64, 12, elements=st.floats(-100, 100)), arrays(np.float64, 12, elements=st.floats(-100, 100)),
       st.floats(0.1, 10), st.floats(-5, 5))
@settings(max_examples=100, deadline=None)
def test_pearson_affine_invariance(x, y, a, b):
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    c = pearson(x, y)
    assert -1 <= c.r <= 1 and 0 <= c.p <= 1
    assert pearson(a * x + b, y).r == pytest.approx(c.r, abs=1e-9)
    assert pearson(-x, y).r == pytest.approx(-c.r, abs=1e-12)


def test_pearson_errors():
    with pytest.raises(ValueError, match="n >= 3"):
        pearson([1, 2], [3, 4])
    with pytest.raises(ValueError, match="variance"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError, match="inclusion_rule"):
        pearson([1, 2, 3], [1, 2, 3], "some")
    with pytest.raises(ValueError, match="non-finite"):
        pearson([1, 2, np.nan, 4], [1, 2, 3, 4], "all_bins")


def test_inclusion_rules_on_constructed_tables():
    # 6 bins; bin 1 is empty in variant a, bin 4 empty in variant b
    count_a = np.array([3, 0, 2, 5, 1, 4])
    count_b = np.array([2, 1, 6, 3, 0, 2])
    w_a = np.array([0.1, np.nan, 0.3, 0.5, 0.2, 0.6])
    w_b = np.array([0.2, 0.4, 0.1, 0.7, np.nan, 0.5])
    c = pearson(w_a, w_b, "both_nonempty", count_a, count_b)
    keep = [0, 2, 3, 5]
    assert c.n == 4
    assert c.r == pytest.approx(sps.pearsonr(w_a[keep], w_b[keep]).statistic, abs=1e-12)
    imp_a = np.where(count_a > 0, count_a * 0.5 * np.nan_to_num(w_a), 0.0)
    imp_b = np.where(count_b > 0, count_b * 0.5 * np.nan_to_num(w_b), 0.0)
    ci = pearson(imp_a, imp_b, "all_bins", count_a, count_b)
    assert ci.n == 6
    assert ci.r == pytest.approx(sps.pearsonr(imp_a, imp_b).statistic, abs=1e-12)


# --- variant comparison -------------------------------------------------------


def test_self_comparison_gives_r_one(tmp_path):
    v = _random_variant(Regime.BIOLOGICAL, 1)
    rep = compare_variants(v, v)
    assert set(rep.correlations) == {"weights_by_rf_bin", "weights_by_response_bin", "impact_by_rf_bin",
                                     "impact_by_response_bin"}
    for c in rep.correlations.values():
        assert c.r == pytest.approx(1.0, abs=1e-12)
    assert rep.correlations["impact_by_rf_bin"].n == 30
    assert rep.correlations["impact_by_response_bin"].n == 32
    assert rep.correlations["weights_by_rf_bin"].n == int((rep.rf["bio"].count > 0).sum())
    paths = write_report_tables(tmp_path, rep)
    lines = {p.name: p.read_text().splitlines() for p in paths}
    assert len(lines["bins_rf.csv"]) == 1 + 2 * 30
    assert len(lines["bins_resp.csv"]) == 1 + 2 * 32
    assert len(lines["impact.csv"]) == 1 + 30 + 32
    back = read_correlations_csv(tmp_path / "correlations.csv")
    assert back == rep.correlations


def test_bio_vs_uniform_inclusion_counts():
    bio = [_random_variant(Regime.BIOLOGICAL, s) for s in (0, 1)]
    uni = [_random_variant(Regime.UNIFORM, s) for s in (0, 1)]
    rep = compare_variants(bio, uni)
    a, b = rep.rf["bio"], rep.rf["uni"]
    both = int(((a.count > 0) & (b.count > 0)).sum())
    assert rep.correlations["weights_by_rf_bin"].n == both < 30
    assert rep.correlations["impact_by_rf_bin"].n == 30
    assert isinstance(rep.correlations["weights_by_rf_bin"], CorrelationResult)
    assert len(rep.per_seed_rf["bio"]) == 2


def test_average_tables():
    v0, v1 = _random_variant(Regime.BIOLOGICAL, 0), _random_variant(Regime.BIOLOGICAL, 1)
    t0 = bin_by_rf(v0.descriptors, v0.stats, v0.mean_abs_weight)
    t1 = bin_by_rf(v1.descriptors, v1.stats, v1.mean_abs_weight)
    avg = average_tables([t0, t1])
    np.testing.assert_allclose(avg.count, (t0.count + t1.count) / 2)
    np.testing.assert_allclose(avg.impact, (t0.impact + t1.impact) / 2)
    both = (t0.count > 0) & (t1.count > 0)
    np.testing.assert_allclose(avg.mean_abs_weight[both], (t0.mean_abs_weight[both] + t1.mean_abs_weight[both]) / 2)


def test_mismatched_edges_rejected():
    v = _random_variant(Regime.UNIFORM, 0)
    t0 = bin_by_rf(v.descriptors, v.stats, v.mean_abs_weight)
    t1 = bin_by_rf(v.descriptors, v.stats, v.mean_abs_weight, nx_edges=[0.1, 0.8, 1.585])
    with pytest.raises(ValueError, match="edges"):
        average_tables([t0, t1])
