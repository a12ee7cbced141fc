import itertools
import math

import numpy as np
import pytest

from streamtemp.evaluate import (
    CATEGORY_BETTER,
    CATEGORY_NONE,
    CATEGORY_WORSE,
    aggregate,
    climatology_predictions,
    compare_to_baseline,
    day_of_year,
    member_rmse_std,
    permutation_importance,
    pooled_rmse,
    site_metrics,
    temporal_breakdown,
    wilcoxon_two_sided,
)
from streamtemp.evaluate import _exact_signed_rank_p
from streamtemp.numerics import Rng


def dates_from(start, n):
    return np.datetime64(start, "D") + np.arange(n)


def naive_midranks(mags):
    """Independent midrank computation: strictly-smaller count plus half
    the tie group."""
    ranks = []
    for m in mags:
        smaller = sum(1 for x in mags if x < m)
        ties = sum(1 for x in mags if x == m)
        ranks.append(smaller + (ties + 1) / 2.0)
    return ranks


def brute_force_wilcoxon_p(a, b):
    """Enumerate all 2^n sign assignments of the nonzero differences and
    count tail mass exactly (doubled ranks keep sums integral)."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0.0]
    n = len(d)
    doubled = [int(round(2 * r)) for r in naive_midranks(np.abs(d))]
    w_obs = sum(r for r, di in zip(doubled, d) if di > 0)
    count_le = count_ge = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(doubled, signs) if s)
        count_le += w <= w_obs
        count_ge += w >= w_obs
    denom = 2**n
    return min(1.0, 2.0 * min(count_le / denom, count_ge / denom))


class TestDayOfYear:
    def test_non_leap_ordinals(self):
        d = np.array(["2021-01-01", "2021-02-28", "2021-03-01", "2021-12-31"], dtype="datetime64[D]")
        np.testing.assert_array_equal(day_of_year(d), [1, 59, 60, 365])

    def test_leap_year_alignment(self):
        d = np.array(["2020-02-28", "2020-02-29", "2020-03-01", "2020-12-31"], dtype="datetime64[D]")
        # Feb 29 parks at 366 so Mar 1 keeps ordinal 60 in every year
        np.testing.assert_array_equal(day_of_year(d), [59, 366, 60, 365])

    def test_century_rule(self):
        assert day_of_year(np.array(["1900-03-01"], dtype="datetime64[D]"))[0] == 60
        assert day_of_year(np.array(["2000-02-29"], dtype="datetime64[D]"))[0] == 366


class TestSiteMetrics:
    def test_perfect_predictions(self):
        d = dates_from("2020-01-01", 20)
        obs = np.linspace(5, 25, 20)
        m = site_metrics("s1", d, obs.copy(), obs)
        assert m.rmse == 0.0 and m.mean_bias == 0.0 and m.rmse_warm10 == 0.0
        assert m.n_obs == 20

    def test_constant_offset(self):
        d = dates_from("2020-01-01", 15)
        obs = np.linspace(0, 14, 15)
        m = site_metrics("s1", d, obs + 1.0, obs)
        assert m.rmse == pytest.approx(1.0)
        assert m.mean_bias == pytest.approx(1.0)
        assert m.rmse_warm10 == pytest.approx(1.0)

    def test_warm_subset_size_is_ceil_decile(self):
        d = dates_from("2020-01-01", 10)
        obs = np.arange(10.0)
        pred = obs.copy()
        pred[9] += 3.0  # only the single warmest date carries error
        m = site_metrics("s1", d, pred, obs)
        assert m.rmse_warm10 == pytest.approx(3.0)
        # 11 observations -> ceil(1.1) = 2 warm dates
        d11 = dates_from("2020-01-01", 11)
        obs11 = np.arange(11.0)
        pred11 = obs11.copy()
        pred11[10] += 3.0
        m11 = site_metrics("s1", d11, pred11, obs11)
        assert m11.rmse_warm10 == pytest.approx(math.sqrt(9.0 / 2.0))

    def test_warm_ties_break_by_date_order(self):
        d = dates_from("2020-01-01", 10)
        obs = np.full(10, 20.0)  # all tied: earliest date wins the one slot
        pred = obs.copy()
        pred[0] += 2.0
        m = site_metrics("s1", d, pred, obs)
        assert m.rmse_warm10 == pytest.approx(2.0)

    def test_nan_observations_excluded(self):
        d = dates_from("2020-01-01", 6)
        obs = np.array([1.0, np.nan, 3.0, np.nan, 5.0, 6.0])
        pred = np.array([2.0, 99.0, 4.0, 99.0, 6.0, 7.0])
        m = site_metrics("s1", d, pred, obs)
        assert m.n_obs == 4
        assert m.rmse == pytest.approx(1.0)

    def test_per_year_rmse(self):
        d = np.array(["2020-12-31", "2021-01-01", "2021-01-02"], dtype="datetime64[D]")
        obs = np.zeros(3)
        pred = np.array([1.0, 2.0, 2.0])
        m = site_metrics("s1", d, pred, obs)
        assert m.per_year_rmse == {2020: pytest.approx(1.0), 2021: pytest.approx(2.0)}

    def test_zero_observations_rejected(self):
        d = dates_from("2020-01-01", 3)
        with pytest.raises(ValueError):
            site_metrics("s1", d, np.zeros(3), np.full(3, np.nan))


def make_metrics(rmses):
    d = dates_from("2020-01-01", 10)
    obs = np.zeros(10)
    return [site_metrics(f"s{i}", d, np.full(10, r), obs) for i, r in enumerate(rmses)]


class TestAggregate:
    def test_median_examples(self):
        s = aggregate(make_metrics([1.0, 2.0, 9.0]))
        assert s.median_rmse == pytest.approx(2.0)

    def test_threshold_strict(self):
        s = aggregate(make_metrics([1.9, 2.0, 2.1]))
        assert s.n_sites_under_2c == 1

    def test_lower_median_even_count(self):
        s = aggregate(make_metrics([1.0, 2.0, 3.0, 4.0]))
        assert s.median_rmse == pytest.approx(2.0)

    def test_reorder_invariance(self):
        a = aggregate(make_metrics([3.0, 1.0, 2.0, 5.0]))
        b = aggregate(make_metrics([5.0, 2.0, 3.0, 1.0]))
        assert a.median_rmse == b.median_rmse
        assert a.mean_rmse == b.mean_rmse
        assert a.std_rmse == b.std_rmse

    def test_mean_and_median_both_emitted(self):
        s = aggregate(make_metrics([1.0, 2.0, 9.0]))
        assert s.mean_rmse == pytest.approx(4.0)
        assert s.median_rmse == pytest.approx(2.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestWilcoxon:
    def test_all_negative_diffs_example(self):
        r = wilcoxon_two_sided([1.0, 2.0, 3.0], [2.0, 3.0, 4.0])
        assert r.statistic == 0.0
        assert r.p_value == pytest.approx(0.25, abs=1e-15)
        assert r.method == "exact"

    def test_identical_series_no_decision(self):
        r = wilcoxon_two_sided([1.0, 2.0], [1.0, 2.0])
        assert not r.decided
        assert r.p_value is None
        assert r.n_nonzero == 0

    @pytest.mark.parametrize("seed", range(20))
    def test_exact_matches_enumeration(self, seed):
        gen = np.random.default_rng(seed)
        n = int(gen.integers(3, 13))
        a = gen.normal(size=n)
        b = gen.normal(size=n)
        if seed % 3 == 0:
            # force magnitude ties and zero differences into the mix
            a = np.round(a, 1)
            b = np.round(b, 1)
        r = wilcoxon_two_sided(a, b)
        if r.decided:
            assert r.p_value == pytest.approx(brute_force_wilcoxon_p(a, b), abs=1e-12)

    def test_exact_branch_used_up_to_25(self):
        gen = np.random.default_rng(1)
        r = wilcoxon_two_sided(gen.normal(size=25), gen.normal(size=25))
        assert r.method == "exact"
        r = wilcoxon_two_sided(gen.normal(size=26), gen.normal(size=26))
        assert r.method == "normal"

    def test_normal_branch_close_to_exact_dp(self):
        gen = np.random.default_rng(7)
        a = gen.normal(size=40)
        b = a + gen.normal(scale=0.8, size=40)
        r = wilcoxon_two_sided(a, b)
        d = a - b
        d = d[d != 0]
        doubled = np.array([int(round(2 * x)) for x in naive_midranks(np.abs(d))])
        w_plus = int(sum(r_ for r_, di in zip(doubled, d) if di > 0))
        exact = _exact_signed_rank_p(doubled, w_plus)
        assert r.p_value == pytest.approx(exact, abs=0.02)

    def test_p_in_unit_interval(self):
        gen = np.random.default_rng(3)
        for n in (5, 30):
            a, b = gen.normal(size=n), gen.normal(size=n)
            r = wilcoxon_two_sided(a, b)
            assert 0.0 < r.p_value <= 1.0


class TestCompareToBaseline:
    def test_identical_models_all_no_significance(self):
        errs = {f"s{i}": np.abs(np.random.default_rng(i).normal(size=20)) for i in range(4)}
        result = compare_to_baseline(errs, {k: v.copy() for k, v in errs.items()})
        assert result.counts[CATEGORY_NONE] == 4
        assert result.counts[CATEGORY_BETTER] == 0
        assert result.counts[CATEGORY_WORSE] == 0

    def test_uniform_inflation_significant_worse(self):
        gen = np.random.default_rng(0)
        base = {f"s{i}": np.abs(gen.normal(size=10)) + 0.1 for i in range(3)}
        model = {k: v + 0.5 for k, v in base.items()}
        result = compare_to_baseline(model, base)
        assert result.counts[CATEGORY_WORSE] == 3
        assert all(r.category == CATEGORY_WORSE for r in result.sites)
        assert result.mean_delta_rmse[CATEGORY_WORSE] > 0

    def test_deflation_significant_better(self):
        gen = np.random.default_rng(1)
        base = {f"s{i}": np.abs(gen.normal(size=12)) + 1.0 for i in range(3)}
        model = {k: v * 0.3 for k, v in base.items()}
        result = compare_to_baseline(model, base)
        assert result.counts[CATEGORY_BETTER] == 3
        assert result.mean_delta_rmse[CATEGORY_BETTER] < 0

    def test_categories_partition(self):
        gen = np.random.default_rng(2)
        base = {f"s{i}": np.abs(gen.normal(size=15)) for i in range(6)}
        model = {k: (v + 0.4 if i % 2 else v) for i, (k, v) in enumerate(sorted(base.items()))}
        result = compare_to_baseline(model, base)
        assert sum(result.counts.values()) == 6
        assert len(result.sites) == 6

    def test_site_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compare_to_baseline({"a": np.ones(3)}, {"b": np.ones(3)})


class TestPermutationImportance:
    def setup_method(self):
        gen = np.random.default_rng(0)
        self.feature_names = ("x0", "x1", "x2")
        self.inputs = {f"s{i}": gen.normal(size=(50, 3)) for i in range(3)}
        # target depends only on x1
        self.observed = {k: v[:, 1].copy() for k, v in self.inputs.items()}

    @staticmethod
    def predict_x1(inputs):
        return {k: v[:, 1].copy() for k, v in inputs.items()}

    def test_dependent_feature_positive(self):
        imp = permutation_importance(
            self.predict_x1, self.inputs, self.observed, self.feature_names,
            {"x1": ("x1",)}, Rng(0), repeats=5,
        )
        assert imp["x1"] > 0.5

    def test_ignored_feature_exactly_zero(self):
        imp = permutation_importance(
            self.predict_x1, self.inputs, self.observed, self.feature_names,
            {"x0": ("x0",), "x2": ("x2",)}, Rng(0), repeats=3,
        )
        # the model never reads those columns, so the delta is exactly 0
        assert imp["x0"] == 0.0
        assert imp["x2"] == 0.0

    def test_noise_feature_small_under_noisy_model(self):
        def predict(inputs):
            return {k: v[:, 1] + 0.01 * v[:, 0] for k, v in inputs.items()}

        imp = permutation_importance(
            predict, self.inputs, self.observed, self.feature_names,
            {"x0": ("x0",)}, Rng(1), repeats=10,
        )
        target_std = np.std(np.concatenate(list(self.observed.values())))
        assert abs(imp["x0"]) < 0.05 * target_std

    def test_group_column_order_invariant(self):
        def predict(inputs):
            return {k: v[:, 1] + 0.5 * v[:, 2] for k, v in inputs.items()}

        a = permutation_importance(
            predict, self.inputs, self.observed, self.feature_names,
            {"g": ("x1", "x2")}, Rng(2), repeats=4,
        )
        b = permutation_importance(
            predict, self.inputs, self.observed, self.feature_names,
            {"g": ("x2", "x1")}, Rng(2), repeats=4,
        )
        assert a["g"] == b["g"]

    def test_unknown_feature_rejected(self):
        with pytest.raises(ValueError):
            permutation_importance(
                self.predict_x1, self.inputs, self.observed, self.feature_names,
                {"g": ("missing",)}, Rng(0),
            )

    def test_unobserved_cells_ignored(self):
        observed = {k: v.copy() for k, v in self.observed.items()}
        observed["s0"][::2] = np.nan
        imp = permutation_importance(
            self.predict_x1, self.inputs, observed, self.feature_names,
            {"x1": ("x1",)}, Rng(0), repeats=3,
        )
        assert np.isfinite(imp["x1"])


class TestMemberSpread:
    def test_identical_members_zero(self):
        obs = {"s": np.zeros(5)}
        preds = [{"s": np.ones(5)}, {"s": np.ones(5)}]
        assert member_rmse_std(preds, obs) == 0.0

    def test_spread_positive(self):
        obs = {"s": np.zeros(4)}
        preds = [{"s": np.full(4, 1.0)}, {"s": np.full(4, 2.0)}]
        assert member_rmse_std(preds, obs) == pytest.approx(0.5)

    def test_single_member_rejected(self):
        with pytest.raises(ValueError):
            member_rmse_std([{"s": np.ones(3)}], {"s": np.zeros(3)})


class TestPooledRmse:
    def test_hand_computed(self):
        preds = {"a": np.array([1.0, 2.0]), "b": np.array([3.0])}
        obs = {"a": np.array([0.0, 0.0]), "b": np.array([0.0])}
        assert pooled_rmse(preds, obs) == pytest.approx(math.sqrt((1 + 4 + 9) / 3))

    def test_nan_skipped(self):
        preds = {"a": np.array([1.0, 5.0])}
        obs = {"a": np.array([0.0, np.nan])}
        assert pooled_rmse(preds, obs) == pytest.approx(1.0)


class TestTemporalBreakdown:
    def test_uniform_error(self):
        d = dates_from("2021-01-01", 365)
        obs = np.full(365, 10.0)
        result = temporal_breakdown({"s": d}, {"s": obs + 1.0}, {"s": obs})
        assert set(result.day_of_year_rmse) == set(range(1, 366))
        assert all(v == pytest.approx(1.0) for v in result.day_of_year_rmse.values())

    def test_leap_day_bucket(self):
        d = np.array(["2020-02-29"], dtype="datetime64[D]")
        result = temporal_breakdown({"s": d}, {"s": np.array([11.0])}, {"s": np.array([10.0])})
        assert result.day_of_year_rmse == {366: pytest.approx(1.0)}

    def test_median_across_sites(self):
        d = dates_from("2021-06-01", 1)
        obs = np.array([10.0])
        sites = {f"s{i}": d for i in range(3)}
        preds = {"s0": obs + 1, "s1": obs + 2, "s2": obs + 9}
        result = temporal_breakdown(sites, preds, {k: obs for k in sites})
        (value,) = result.day_of_year_rmse.values()
        assert value == pytest.approx(2.0)

    def test_seasonal_error_shape(self):
        d = dates_from("2021-01-01", 365)
        doy = day_of_year(d)
        summer = (doy > 150) & (doy < 250)
        err = np.where(summer, 3.0, 0.5)
        obs = np.full(365, 10.0)
        result = temporal_breakdown({"s": d}, {"s": obs + err}, {"s": obs})
        assert result.day_of_year_rmse[200] > result.day_of_year_rmse[20]

    def test_per_site_year_table(self):
        d = np.array(["2020-06-01", "2021-06-01"], dtype="datetime64[D]")
        obs = np.zeros(2)
        pred = np.array([1.0, 2.0])
        result = temporal_breakdown({"s": d}, {"s": pred}, {"s": obs})
        assert result.per_site_year_rmse["s"] == {2020: pytest.approx(1.0), 2021: pytest.approx(2.0)}


class TestClimatology:
    def test_per_day_means(self):
        d = np.array(["2020-06-01", "2021-06-01", "2020-07-01"], dtype="datetime64[D]")
        obs = np.array([10.0, 14.0, 20.0])
        target = np.array(["2022-06-01", "2022-07-01"], dtype="datetime64[D]")
        np.testing.assert_allclose(climatology_predictions(d, obs, target), [12.0, 20.0])

    def test_fallback_to_overall_mean(self):
        d = np.array(["2020-06-01"], dtype="datetime64[D]")
        obs = np.array([10.0])
        target = np.array(["2022-12-25"], dtype="datetime64[D]")
        np.testing.assert_allclose(climatology_predictions(d, obs, target), [10.0])

    def test_nan_training_values_skipped(self):
        d = np.array(["2020-06-01", "2021-06-01"], dtype="datetime64[D]")
        obs = np.array([10.0, np.nan])
        target = np.array(["2022-06-01"], dtype="datetime64[D]")
        np.testing.assert_allclose(climatology_predictions(d, obs, target), [10.0])

    def test_in_sample_uniform_error_beaten_by_identity(self):
        # climatology on a noisy series has nonzero error; the identity does not
        gen = np.random.default_rng(0)
        d = dates_from("2020-01-01", 730)
        obs = 10 + 8 * np.sin(2 * np.pi * np.arange(730) / 365.25) + gen.normal(size=730)
        clim = climatology_predictions(d, obs, d)
        rmse = math.sqrt(np.mean((clim - obs) ** 2))
        assert rmse > 0.1
