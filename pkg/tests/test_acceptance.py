"""Release gate: one test per guarantee the library ships with.

Each test here states a property end users rely on and checks it
against an oracle computed by independent means in this file: central
finite differences for the backward pass, exhaustive sign enumeration
for the signed-rank test, the classical subset formula for Shapley
values, a brute-force split search for the stump, hand-built arithmetic
for the metric conventions, and a synthetic corpus with known physics
for the end-to-end checks.  Every test is seeded; a failure here means
a shipped promise broke, not that a fixture drifted.

The two training-heavy checks (duplicated-source transfer, three-seed
replication) run real model fits and take a few minutes each.  The
whole module is sized to finish well inside the half-hour budget the
replication check asserts for itself.
"""

import dataclasses
import itertools
import json
import math
import time
import warnings

import numpy as np

from streamtemp.cli import importance_groups, main as cli_main
from streamtemp.data_model import (
    METEO_COLUMNS,
    SiteRecord,
    build_dynamic_inputs,
    filter_observations,
    split_train_test,
    transform_dam_distances,
)
from streamtemp.evaluate import (
    aggregate,
    climatology_predictions,
    compare_to_baseline,
    permutation_importance,
    site_metrics,
    wilcoxon_two_sided,
)
from streamtemp.experiments import (
    ExperimentPlan,
    RunSettings,
    canonical_feature_spec,
    run_grouped,
    run_topdown,
)
from streamtemp.fixtures import make_fixture, write_fixture_csvs
from streamtemp.gbrt import FeatureMatrix, GbrtConfig, fit_gbrt, shapley_values
from streamtemp.lstm import (
    LstmConfig,
    LstmParams,
    backward,
    forward_batch,
    masked_mse,
    masked_mse_gradient,
)
from streamtemp.mtl import (
    SOURCE_FEATURE_SPEC,
    build_meta_features,
    build_transfer_matrix,
    meta_feature_names,
    predict_unmonitored,
    train_metamodel,
    train_source_models,
)
from streamtemp.normalize import Normalizer, ZeroVarianceWarning
from streamtemp.numerics import Rng, lower_median
from streamtemp.thermal_regime import amplitude_ratio_phase_lag, fit_sine
from streamtemp.trainer import TrainConfig


# ---------------------------------------------------------------------------
# 1. backward pass against central finite differences


def _finite_difference_grads(params, inputs, targets, mask, eps=1e-5):
    """Central-difference gradient of the masked MSE, entry by entry."""
    grads = {}
    for name, arr in params.arrays():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = masked_mse(forward_batch(params, inputs)[:, :, 0], targets, mask)
            flat[idx] = orig - eps
            down = masked_mse(forward_batch(params, inputs)[:, :, 0], targets, mask)
            flat[idx] = orig
            gflat[idx] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


def _max_relative_error(analytic, numeric):
    """|a - n| / max(1, |a|, |n|): relative for large entries, absolute for
    small ones, so finite-difference noise near zero cannot dominate."""
    worst = 0.0
    for name in numeric:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def test_01_bptt_matches_central_finite_differences():
    started = time.perf_counter()
    for trial in range(20):
        gen = np.random.default_rng(trial)
        batch = int(gen.integers(1, 4))
        t_len = int(gen.integers(5, 21))
        n_in = int(gen.integers(2, 6))
        hidden = int(gen.integers(3, 9))
        layers = int(gen.integers(1, 3))
        cfg = LstmConfig(
            hidden_size=hidden, num_layers=layers, sequence_length=8, window_shift=4
        )
        params = LstmParams.init(n_in, cfg, Rng(trial))
        for _, arr in params.arrays():  # random biases too, so gradients reach them
            arr += 0.05 * gen.normal(size=arr.shape)
        inputs = gen.normal(size=(batch, t_len, n_in))
        targets = gen.normal(size=(batch, t_len))
        mask = gen.random(size=(batch, t_len)) > 0.3
        mask[0, -1] = True
        _, analytic = backward(params, inputs, targets, mask)
        numeric = _finite_difference_grads(params, inputs, targets, mask)
        err = _max_relative_error(analytic, numeric)
        assert err < 1e-4, f"trial {trial}: gradient error {err:.3e}"
    assert time.perf_counter() - started < 60.0


# ---------------------------------------------------------------------------
# 2. exact signed-rank p against full sign enumeration


def _naive_midranks(mags):
    ranks = []
    for m in mags:
        smaller = sum(1 for x in mags if x < m)
        ties = sum(1 for x in mags if x == m)
        ranks.append(smaller + (ties + 1) / 2.0)
    return ranks


def _brute_force_wilcoxon_p(a, b):
    """All 2^n sign assignments of the nonzero differences, counted exactly
    (doubled ranks keep the sums integral)."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0.0]
    n = len(d)
    doubled = [int(round(2 * r)) for r in _naive_midranks(np.abs(d))]
    w_obs = sum(r for r, di in zip(doubled, d) if di > 0)
    count_le = count_ge = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(doubled, signs) if s)
        count_le += w <= w_obs
        count_ge += w >= w_obs
    denom = 2**n
    return min(1.0, 2.0 * min(count_le / denom, count_ge / denom))


def test_02_exact_wilcoxon_matches_sign_enumeration():
    gen = np.random.default_rng(2024)
    for trial in range(200):
        n = int(gen.integers(2, 13))
        a = gen.normal(size=n)
        b = gen.normal(size=n)
        if trial % 2:  # a coarse grid forces tied magnitudes
            a = np.round(a * 2.0) / 2.0
            b = np.round(b * 2.0) / 2.0
        if trial % 5 == 0:  # and exact zero differences must be dropped
            b[0] = a[0]
        if np.all(a == b):
            a[-1] += 1.0
        result = wilcoxon_two_sided(a, b)
        expected = _brute_force_wilcoxon_p(a, b)
        assert result.method == "exact"
        assert abs(result.p_value - expected) < 1e-12, f"trial {trial}"


# ---------------------------------------------------------------------------
# 3. Shapley values against the subset formula


def _subset_shapley_oracle(model, instance, background):
    """Classical subset-sum Shapley with the background-imputation value
    function; independent of the permutation-walk implementation."""
    d = len(instance)
    background = np.atleast_2d(background)

    def value(subset):
        rows = background.copy()
        for j in subset:
            rows[:, j] = instance[j]
        return float(np.mean(model.predict(rows)))

    phi = np.zeros(d)
    for j in range(d):
        others = [k for k in range(d) if k != j]
        for r in range(d):
            for s in itertools.combinations(others, r):
                w = math.factorial(len(s)) * math.factorial(d - len(s) - 1) / math.factorial(d)
                phi[j] += w * (value(set(s) | {j}) - value(set(s)))
    return phi


def test_03_shapley_matches_subset_oracle_and_efficiency():
    for d in (2, 3):
        gen = np.random.default_rng(d)
        x = gen.normal(size=(30, d))
        y = x[:, 0] * 2.0 + (x[:, -1] > 0) * 3.0 + gen.normal(scale=0.1, size=30)
        fm = FeatureMatrix(tuple(f"f{i}" for i in range(d)), x, y)
        model = fit_gbrt(fm, GbrtConfig(estimators=12, learning_rate=0.3, max_depth=2))
        background = fm.x[:7]
        instance = fm.x[11]
        phi = shapley_values(model, instance, background, exact=True)
        oracle = _subset_shapley_oracle(model, instance, background)
        assert np.max(np.abs(phi - oracle)) <= 1e-9

    gen = np.random.default_rng(6)
    x = gen.normal(size=(60, 5))
    fm = FeatureMatrix(tuple(f"f{i}" for i in range(5)), x, x[:, 0] + x[:, 1] ** 2)
    model = fit_gbrt(fm, GbrtConfig(estimators=20, learning_rate=0.3, max_depth=3))
    instance = fm.x[3]
    samples = 64
    phi = shapley_values(model, instance, fm.x, samples=samples, rng=Rng(0))
    bg_preds = model.predict(fm.x)
    se = bg_preds.std() / math.sqrt(samples)
    gap = phi.sum() - (model.predict(instance[None, :])[0] - bg_preds.mean())
    assert abs(gap) <= 3 * se + 1e-12


# ---------------------------------------------------------------------------
# 4. normalization round trip; unobserved dates are exactly invisible


def _insert_rows(gen, values, fill, positions, new_len):
    out = np.full(new_len, fill, dtype=values.dtype)
    keep = np.ones(new_len, dtype=bool)
    keep[positions] = False
    out[keep] = values
    return out


def test_04_normalizer_round_trip_and_masking_bit_exactness():
    gen = np.random.default_rng(4)

    # round trip through the fitted feature and target statistics
    names = tuple(f"f{i}" for i in range(6))
    scales = np.array([0.01, 0.3, 1.0, 7.0, 120.0, 1000.0])
    x = gen.normal(size=(200, 6)) * scales + scales
    y = gen.normal(size=200) * 4.0 + 12.0
    norm = Normalizer.fit(x, y, names)
    for i, name in enumerate(names):
        probe = gen.normal(size=50) * scales[i] + scales[i]
        back = norm.inverse_transform(norm.transform(probe, name), name)
        assert np.max(np.abs(back - probe)) < 1e-12
    probe_y = gen.normal(size=50) * 4.0 + 12.0
    back_y = norm.inverse_transform_target(norm.transform_target(probe_y))
    assert np.max(np.abs(back_y - probe_y)) < 1e-12

    # inserting unobserved dates anywhere: same loss bits, same gradient
    for trial in range(25):
        n = int(gen.integers(8, 60))
        preds = gen.normal(size=n)
        targets = gen.normal(size=n)
        mask = gen.random(size=n) > 0.4
        mask[0] = True
        k = int(gen.integers(1, 6))
        positions = np.sort(gen.choice(n + k, size=k, replace=False))
        keep = np.ones(n + k, dtype=bool)
        keep[positions] = False
        preds2 = _insert_rows(gen, preds, gen.normal(), positions, n + k)
        targets2 = _insert_rows(gen, targets, np.nan, positions, n + k)
        mask2 = np.zeros(n + k, dtype=bool)
        mask2[keep] = mask
        for reduction in ("mean", "sum"):
            a = masked_mse(preds, targets, mask, reduction=reduction)
            b = masked_mse(preds2, targets2, mask2, reduction=reduction)
            assert a == b, f"trial {trial}: loss changed under insertion"
            ga = masked_mse_gradient(preds, targets, mask, reduction=reduction)
            gb = masked_mse_gradient(preds2, targets2, mask2, reduction=reduction)
            assert np.array_equal(gb[keep], ga)
            assert not gb[positions].any()

    # through the whole network: appended unobserved dates change nothing
    for trial in range(10):
        tgen = np.random.default_rng(100 + trial)
        batch = int(tgen.integers(1, 4))
        t_len = int(tgen.integers(6, 16))
        n_in = int(tgen.integers(2, 6))
        cfg = LstmConfig(
            hidden_size=int(tgen.integers(3, 8)),
            num_layers=int(tgen.integers(1, 3)),
            sequence_length=8,
            window_shift=4,
        )
        params = LstmParams.init(n_in, cfg, Rng(trial))
        for _, arr in params.arrays():
            arr += 0.05 * tgen.normal(size=arr.shape)
        inputs = tgen.normal(size=(batch, t_len, n_in))
        targets = tgen.normal(size=(batch, t_len))
        mask = tgen.random(size=(batch, t_len)) > 0.3
        mask[0, 0] = True
        k = int(tgen.integers(1, 5))
        inputs2 = np.concatenate([inputs, tgen.normal(size=(batch, k, n_in))], axis=1)
        targets2 = np.concatenate([targets, np.full((batch, k), np.nan)], axis=1)
        mask2 = np.concatenate([mask, np.zeros((batch, k), dtype=bool)], axis=1)

        out = forward_batch(params, inputs)
        out2 = forward_batch(params, inputs2)
        assert np.array_equal(out2[:, :t_len], out)
        loss, _ = backward(params, inputs, targets, mask)
        loss2, _ = backward(params, inputs2, targets2, mask2)
        assert loss == loss2


# ---------------------------------------------------------------------------
# 5. annual sinusoid recovery, amplitude ratio, phase lag


def test_05_sine_fit_recovers_amplitude_phase_ratio_lag():
    n = 1000
    dates = np.datetime64("2016-01-03", "D") + np.arange(n)
    t = np.arange(n, dtype=np.float64)
    w = 2.0 * np.pi / 365.25

    air_amp, air_phase = 8.0, 1.3
    air = 12.0 + air_amp * np.sin(w * t + air_phase)
    air_fit = fit_sine(dates, air)
    assert abs(air_fit.amplitude - air_amp) < 1e-9
    assert abs(air_fit.phase - air_phase) < 1e-9
    assert abs(air_fit.mean_level - 12.0) < 1e-9
    assert air_fit.residual_rmse < 1e-9

    # half the amplitude, peaking a quarter period later
    water_phase = air_phase - np.pi / 2.0
    water = 4.0 + (air_amp / 2.0) * np.sin(w * t + water_phase)
    water_fit = fit_sine(dates, water)
    ratio, lag = amplitude_ratio_phase_lag(air_fit, water_fit)
    assert abs(ratio - 0.5) < 1e-9
    assert abs(lag - 91.3) <= 0.1


# ---------------------------------------------------------------------------
# 6. boosting training curve and the exact stump


def _exhaustive_stump(x, y):
    """Brute-force single-split search: every feature, every midpoint between
    distinct adjacent sorted values; minimizes left+right SSE.  First-best
    wins on (feature, threshold) order."""
    n, d = x.shape
    best = None  # (sse, feat, thr, left_mean, right_mean)
    for j in range(d):
        vals = np.unique(x[:, j])
        for a, b in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (a + b)
            left = y[x[:, j] <= thr]
            right = y[x[:, j] > thr]
            sse = float(((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum())
            if best is None or sse < best[0] - 1e-12:
                best = (sse, j, thr, float(left.mean()), float(right.mean()))
    return best


def test_06_gbrt_monotone_training_and_exact_stump():
    for trial in range(20):
        gen = np.random.default_rng(trial)
        n = int(gen.integers(30, 90))
        d = int(gen.integers(2, 6))
        x = gen.normal(size=(n, d))
        y = x[:, 0] * gen.normal() + np.sin(x[:, -1]) + gen.normal(scale=0.5, size=n)
        fm = FeatureMatrix(tuple(f"f{i}" for i in range(d)), x, y)
        config = GbrtConfig(
            estimators=int(gen.integers(10, 50)),
            learning_rate=float(gen.uniform(0.05, 1.0)),
            max_depth=int(gen.integers(1, 4)),
        )
        model = fit_gbrt(fm, config)
        curve = model.staged_train_mse(fm)
        slack = 1e-12 * max(1.0, float(curve[0]))
        assert np.all(np.diff(curve) <= slack), f"trial {trial}: training MSE rose"

    for seed in range(6):
        gen = np.random.default_rng(1000 + seed)
        x = gen.normal(size=(30, 4))
        y = gen.normal(size=30)
        fm = FeatureMatrix(("a", "b", "c", "d"), x, y)
        model = fit_gbrt(fm, GbrtConfig(estimators=1, learning_rate=1.0, max_depth=1))
        tree = model.trees[0]
        _, feat, thr, lmean, rmean = _exhaustive_stump(x, y)
        assert tree.feature[0] == feat
        assert tree.threshold[0] == thr
        # the tree fits residuals against the base mean, so shift the oracle
        base = y.mean()
        assert abs(tree.value[tree.left[0]] - (lmean - base)) <= 1e-12
        assert abs(tree.value[tree.right[0]] - (rmean - base)) <= 1e-12


# ---------------------------------------------------------------------------
# 7. duplicated source: ranked first, transferred nearly verbatim


# s00 sits far from the cluster in every static respect; the cluster sites
# differ only mildly from each other so cross-transfer errors grade smoothly
_TRANSFER_SITES = {
    "s00": dict(a=10.0, b=0.85, tau=25.0, base=22.0, lat=45.0, lon=-88.0, elev=1500.0),
    "s01": dict(a=3.0, b=0.50, tau=6.0, base=12.0, lat=36.0, lon=-104.0, elev=300.0),
    "s02": dict(a=3.3, b=0.52, tau=7.5, base=12.7, lat=36.4, lon=-103.2, elev=340.0),
    "s03": dict(a=3.6, b=0.54, tau=9.0, base=13.4, lat=36.8, lon=-102.4, elev=380.0),
    "s04": dict(a=3.9, b=0.56, tau=10.5, base=14.1, lat=37.2, lon=-101.6, elev=420.0),
    "s05": dict(a=4.2, b=0.58, tau=12.0, base=14.8, lat=37.6, lon=-100.8, elev=460.0),
}


def _ema(values, tau):
    out = np.empty_like(values)
    out[0] = values[0]
    alpha = 1.0 / tau
    for t in range(1, len(values)):
        out[t] = out[t - 1] + alpha * (values[t] - out[t - 1])
    return out


def _make_transfer_source(site_id, rng):
    """Noise-free lagged-response site: water is exactly a + b * ema(air).

    Drivers start half a year before the first observation.  The
    recurrent state and the lagged response both need spin-up, and the
    earliest observed dates become validation, so they must be well
    posed or model selection keys on noise.
    """
    gen = rng.generator
    p = _TRANSFER_SITES[site_id]
    n = 731
    t = np.arange(n, dtype=np.float64)
    season = np.sin(2.0 * np.pi * (t - 105.0) / 365.25)
    anom = np.empty(n)
    anom[0] = gen.normal(scale=2.0)
    shocks = gen.normal(scale=2.0, size=n)
    for k in range(1, n):
        anom[k] = 0.8 * anom[k - 1] + shocks[k]
    tmean = p["base"] + 10.0 * season + anom
    meteo = np.empty((n, len(METEO_COLUMNS)))
    meteo[:, METEO_COLUMNS.index("tmean_c")] = tmean
    meteo[:, METEO_COLUMNS.index("tmax_c")] = tmean + 4.5
    meteo[:, METEO_COLUMNS.index("tmin_c")] = tmean - 4.5
    meteo[:, METEO_COLUMNS.index("dayl_s")] = 43200.0 + 14400.0 * season
    meteo[:, METEO_COLUMNS.index("swe_kgm2")] = np.maximum(0.0, -40.0 * season)
    meteo[:, METEO_COLUMNS.index("vp_pa")] = 610.0 + 30.0 * tmean
    meteo[:, METEO_COLUMNS.index("srad_wm2")] = 250.0 + 120.0 * season
    precip = gen.gamma(shape=0.35, scale=6.0, size=n)
    discharge = 5.0 + 40.0 * _ema(precip, 8.0)
    water = p["a"] + p["b"] * _ema(tmean, p["tau"])
    water[:180] = np.nan
    return SiteRecord(
        site_id=site_id,
        latitude=p["lat"],
        longitude=p["lon"],
        elevation=p["elev"],
        region_code="01",
        dates=np.datetime64("2015-01-01", "D") + np.arange(n),
        water_temp=water,
        meteo=meteo,
        precip=precip,
        discharge=discharge,
        attributes={"offset_c": p["a"], "gain": p["b"], "tau_d": p["tau"]},
        cluster_id=None,
        dam_distance_km=None,
    )


def test_07_duplicated_source_ranked_first_with_faithful_transfer():
    rng = Rng(77)
    sources = [
        _make_transfer_source(sid, rng.child_named(f"site:{sid}"))
        for sid in sorted(_TRANSFER_SITES)
    ]
    twin = sources[0]
    # the duplicate's sensor goes in later than the twin's, so its observed
    # span sits wholly inside the dates the twin model was fit on
    dup_water = twin.water_temp.copy()
    dup_water[:300] = np.nan
    target = dataclasses.replace(twin, site_id="u_dup", water_temp=dup_water)

    lstm_config = LstmConfig(hidden_size=16, num_layers=1, sequence_length=120, window_shift=60)
    train_config = TrainConfig(
        learning_rate=2e-3, batch_size=16, patience=2400, max_epochs=2400
    )
    models, failures = train_source_models(
        sources, lstm_config, train_config, rng.child_named("sources"),
        n_members=1, preset_fields=(),
    )
    assert failures == {}

    matrix = build_transfer_matrix(models, sources)
    n = len(sources)
    assert matrix.n_entries == n * (n - 1)

    attrs = ("gain", "offset_c", "tau_d")
    by_id = {s.site_id: s for s in sources}
    features = {
        pair: build_meta_features(by_id[pair[0]], by_id[pair[1]], attrs)
        for pair in matrix.entries
    }
    meta = train_metamodel(matrix, features, meta_feature_names(attrs), rng.child_named("meta"))
    result = predict_unmonitored(target, meta, models, by_id, attrs, k=6)
    assert result.chosen_sources[0] == "s00", (
        f"duplicate ranked {result.chosen_sources.index('s00') + 1} of {n}"
    )

    inputs = build_dynamic_inputs(target.without_observations(), SOURCE_FEATURE_SPEC)[0]
    predicted = models["s00"].predict_series(inputs)
    observed = ~np.isnan(target.water_temp)
    residual = predicted[observed] - target.water_temp[observed]
    rmse = float(np.sqrt(np.mean(residual * residual)))
    assert rmse < 0.1, f"transferred RMSE {rmse:.4f}"


# ---------------------------------------------------------------------------
# 8. three-seed replication on the bundled synthetic corpus


def _replication_once(rep):
    """One seeded repetition: train top-down and per-region models on the
    synthetic corpus and score both against the day-of-year climatology."""
    fixture = make_fixture(seed=rep, n_train=24, complete=True)
    sites = [filter_observations(s) for s in fixture.sites]
    sites = [
        dataclasses.replace(
            s, attributes=transform_dam_distances(s.attributes, ("dam_dist_major",))
        )
        if s.attributes
        else s
        for s in sites
    ]
    split = split_train_test(sites, fixture.split_threshold)
    by_id = {s.site_id: s for s in sites}
    attr_names = tuple(sorted({n for s in sites for n in s.attributes}))
    spec = canonical_feature_spec(attr_names)
    settings = RunSettings(
        lstm_config=LstmConfig(
            hidden_size=16, num_layers=1, sequence_length=365, window_shift=182
        ),
        train_config=TrainConfig(
            learning_rate=2e-3, batch_size=32, patience=30, max_epochs=200
        ),
        preset_fields=("weight_decay",),
    )
    rng = Rng(rep)

    topdown = run_topdown(
        ExperimentPlan("topdown", "topdown", spec, ensemble_size=3),
        sites, split, settings, rng.child_named("plan:topdown"),
    )

    # test records overlap the training years, then run one year past them;
    # the climatology is fit on the overlap and judged on the final year
    cut = np.datetime64("2019-01-01")

    def held_out_rmse(predictions):
        out = {}
        for sid, pred in predictions.items():
            site = by_id[sid]
            scored = site.observed_mask & (site.dates >= cut)
            err = pred[scored] - site.water_temp[scored]
            out[sid] = float(np.sqrt(np.mean(err * err)))
        return out

    climatology = {}
    for sid in split.test_site_ids:
        site = by_id[sid]
        early = site.observed_mask & (site.dates < cut)
        climatology[sid] = climatology_predictions(
            site.dates[early], site.water_temp[early], site.dates
        )

    model_rmse = held_out_rmse(topdown.predictions)
    clim_rmse = held_out_rmse(climatology)
    ratio = lower_median(list(model_rmse.values())) / lower_median(list(clim_rmse.values()))

    with warnings.catch_warnings():
        # the two-site region holds no dam-distance variation; dropping
        # that constant column there is the designed behavior
        warnings.simplefilter("ignore", ZeroVarianceWarning)
        grouped = run_grouped(
            ExperimentPlan("regional", "grouped_regional", spec, ensemble_size=3),
            sites, split, settings, rng.child_named("plan:regional"), "region",
        )
    grouped_rmse = held_out_rmse(grouped.predictions)
    small = sorted(
        sid
        for sid in grouped_rmse
        if sid in model_rmse
        and grouped.group_training_counts.get(by_id[sid].region_code, 0) <= 3
    )
    assert small, "fixture must route some test sites to a small group"
    small_degraded = lower_median([grouped_rmse[s] for s in small]) >= lower_median(
        [model_rmse[s] for s in small]
    )

    inputs = topdown.test_inputs(sites)
    observed = {sid: by_id[sid].water_temp for sid in inputs}
    scores = permutation_importance(
        topdown.predict_map,
        inputs,
        observed,
        topdown.feature_names,
        importance_groups(topdown.feature_names),
        rng.child_named("imp"),
        repeats=2,
    )
    top_group = max(sorted(scores), key=lambda g: scores[g])
    return ratio, top_group, small_degraded


def test_08_fixture_replication_three_seeded_repetitions():
    started = time.perf_counter()
    degraded_reps = 0
    for rep in (0, 1, 2):
        ratio, top_group, small_degraded = _replication_once(rep)
        assert ratio <= 0.8, f"rep {rep}: RMSE ratio vs climatology {ratio:.3f}"
        assert top_group == "air_temperature", f"rep {rep}: top group {top_group}"
        degraded_reps += small_degraded
    assert degraded_reps >= 2, f"small groups degraded on only {degraded_reps} of 3 reps"
    assert time.perf_counter() - started < 1800.0


# ---------------------------------------------------------------------------
# 9. byte-identical reruns


def test_09_identical_config_and_seed_reproduce_byte_identical_reports(tmp_path):
    fixture = make_fixture(seed=0, n_train=4, n_test=2)
    paths = write_fixture_csvs(fixture, tmp_path, seed=0)
    config = json.loads(paths["config"].read_text())
    config["training"].update(
        {
            "hidden_size": 4,
            "sequence_length": 40,
            "window_shift": 20,
            "batch_size": 8,
            "max_epochs": 2,
            "patience": 5,
            "ensemble_size": 2,
        }
    )
    config["importance_repeats"] = 1
    paths["config"].write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    outs = (tmp_path / "first", tmp_path / "second")
    for out in outs:
        code = cli_main(["--config", str(paths["config"]), "--out", str(out)])
        assert code == 0
    for name in ("exp1/summary.json", "run.json"):
        first = (outs[0] / name).read_bytes()
        second = (outs[1] / name).read_bytes()
        assert first == second, f"{name} differs between identical runs"


# ---------------------------------------------------------------------------
# 10. metric conventions, hand-computed


def test_10_metric_conventions_match_hand_computations():
    dates = np.datetime64("2019-01-01", "D") + np.arange(10)
    observed = np.arange(10, dtype=np.float64) + 10.0  # warmest day is the last

    table = {
        # site: signed errors added to the observations
        "a": np.array([1.0, -1.0] * 5),
        "b": np.full(10, 0.5),
        "c": np.full(10, -2.0),
    }
    metrics = [
        site_metrics(sid, dates, observed + table[sid], observed) for sid in ("a", "b", "c")
    ]
    by_site = {m.site_id: m for m in metrics}
    assert by_site["a"].rmse == 1.0 and by_site["a"].mean_bias == 0.0
    assert by_site["b"].rmse == 0.5 and by_site["b"].mean_bias == 0.5
    assert by_site["c"].rmse == 2.0 and by_site["c"].mean_bias == -2.0
    # ceil(0.1 * 10) = 1 warm date, the one with the highest observation
    assert by_site["a"].rmse_warm10 == 1.0
    assert by_site["b"].rmse_warm10 == 0.5
    assert by_site["c"].rmse_warm10 == 2.0
    assert all(m.n_obs == 10 for m in metrics)
    assert by_site["a"].per_year_rmse == {2019: 1.0}

    summary = aggregate(metrics)
    assert summary.n_sites == 3
    # lower medians over [1.0, 0.5, 2.0], [0.0, 0.5, -2.0], [1.0, 0.5, 2.0]
    assert summary.median_rmse == 1.0
    assert summary.median_bias == 0.0
    assert summary.median_warm10 == 1.0
    mean_rmse = (1.0 + 0.5 + 2.0) / 3.0
    assert summary.mean_rmse == mean_rmse
    assert summary.mean_bias == (0.0 + 0.5 + -2.0) / 3.0
    assert summary.mean_warm10 == mean_rmse
    expected_std = math.sqrt(
        (((1.0 - mean_rmse) ** 2 + (0.5 - mean_rmse) ** 2) + (2.0 - mean_rmse) ** 2) / 3.0
    )
    assert summary.std_rmse == expected_std
    assert summary.std_warm10 == expected_std
    mean_bias = (0.0 + 0.5 + -2.0) / 3.0
    assert summary.std_bias == math.sqrt(
        (((0.0 - mean_bias) ** 2 + (0.5 - mean_bias) ** 2) + (-2.0 - mean_bias) ** 2) / 3.0
    )
    assert summary.n_sites_under_2c == 2  # strict: site c's 2.0 is out

    # categories: ten uniform paired differences give exact p = 2 / 2^10
    model_abs = {"a": np.full(10, 0.5), "b": np.full(10, 1.0), "c": np.full(10, 2.0)}
    base_abs = {"a": np.full(10, 1.5), "b": np.full(10, 1.0), "c": np.full(10, 1.0)}
    comparison = compare_to_baseline(model_abs, base_abs)
    categories = {s.site_id: s.category for s in comparison.sites}
    assert categories == {
        "a": "significant_better",
        "b": "no_significance",
        "c": "significant_worse",
    }
    p_values = {s.site_id: s.p_value for s in comparison.sites}
    assert p_values["a"] == 2.0 / 1024.0
    assert p_values["b"] is None  # all differences are zero: no evidence
    assert p_values["c"] == 2.0 / 1024.0
    deltas = {s.site_id: s.delta_rmse for s in comparison.sites}
    assert deltas == {"a": -1.0, "b": 0.0, "c": 1.0}
    assert comparison.counts == {
        "significant_better": 1,
        "no_significance": 1,
        "significant_worse": 1,
    }
    assert comparison.mean_delta_rmse["significant_better"] == -1.0
    assert comparison.mean_delta_rmse["no_significance"] == 0.0
    assert comparison.mean_delta_rmse["significant_worse"] == 1.0
