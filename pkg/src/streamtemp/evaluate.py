"""Model skill metrics, paired significance tests, and error breakdowns.

Everything here is a pure fold over aligned prediction/observation
arrays.  Predictions are ensemble means in degrees Celsius; observation
series carry NaN on unobserved dates.  Aggregates across sites use the
lower median so a reported value always belongs to a real site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import lower_median, normal_cdf

__all__ = [
    "SiteMetrics",
    "MetricSummary",
    "WilcoxonResult",
    "SiteComparison",
    "ComparisonResult",
    "TemporalBreakdown",
    "CATEGORY_BETTER",
    "CATEGORY_NONE",
    "CATEGORY_WORSE",
    "day_of_year",
    "site_metrics",
    "aggregate",
    "wilcoxon_two_sided",
    "compare_to_baseline",
    "permutation_importance",
    "member_rmse_std",
    "pooled_rmse",
    "temporal_breakdown",
    "climatology_predictions",
]

CATEGORY_BETTER = "significant_better"
CATEGORY_NONE = "no_significance"
CATEGORY_WORSE = "significant_worse"

EXACT_TEST_MAX_N = 25
WARM_FRACTION = 0.1
RMSE_THRESHOLD_C = 2.0


def day_of_year(dates: np.ndarray) -> np.ndarray:
    """Calendar-aligned day-of-year ordinals in 1..366.

    The same month/day maps to the same ordinal in every year: leap-year
    dates after February 28 take their non-leap ordinal and February 29
    itself becomes 366, so annual overlays never smear by one day.
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    year_starts = dates.astype("datetime64[Y]")
    doy = (dates - year_starts).astype(np.int64) + 1
    years = year_starts.astype(np.int64) + 1970
    leap = (years % 4 == 0) & ((years % 100 != 0) | (years % 400 == 0))
    out = doy.copy()
    out[leap & (doy > 60)] -= 1
    out[leap & (doy == 60)] = 366
    return out


def _validate_aligned(dates, predicted, observed):
    dates = np.asarray(dates, dtype="datetime64[D]")
    predicted = np.asarray(predicted, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if not (dates.shape == predicted.shape == observed.shape) or dates.ndim != 1:
        raise ValueError("dates, predictions, and observations must be aligned 1-D arrays")
    return dates, predicted, observed


@dataclass(frozen=True)
class SiteMetrics:
    """Per-site skill scores over the observed test dates."""

    site_id: str
    rmse: float
    mean_bias: float
    rmse_warm10: float
    n_obs: int
    per_year_rmse: dict[int, float]


def site_metrics(site_id: str, dates, predicted, observed) -> SiteMetrics:
    """Score one site's predictions against its observations.

    Bias is signed as prediction minus observation.  The warm subset is
    the ceil(0.1 * n) dates with the highest observed temperatures; ties
    keep date order, so the earliest tied dates enter first.
    """
    dates, predicted, observed = _validate_aligned(dates, predicted, observed)
    keep = np.isfinite(observed)
    if not keep.any():
        raise ValueError(f"site {site_id!r} has no observations to score")
    dates, predicted, observed = dates[keep], predicted[keep], observed[keep]
    err = predicted - observed
    n = len(err)
    rmse = float(np.sqrt(np.mean(err * err)))
    bias = float(np.mean(err))

    k = math.ceil(WARM_FRACTION * n)
    warm = np.argsort(-observed, kind="stable")[:k]
    warm_err = err[warm]
    rmse_warm = float(np.sqrt(np.mean(warm_err * warm_err)))

    years = dates.astype("datetime64[Y]").astype(np.int64) + 1970
    per_year = {}
    for year in np.unique(years):
        e = err[years == year]
        per_year[int(year)] = float(np.sqrt(np.mean(e * e)))
    return SiteMetrics(site_id, rmse, bias, rmse_warm, n, per_year)


@dataclass(frozen=True)
class MetricSummary:
    """Cross-site roll-up: medians and means of the per-site scores."""

    n_sites: int
    median_rmse: float
    median_bias: float
    median_warm10: float
    mean_rmse: float
    mean_bias: float
    mean_warm10: float
    std_rmse: float
    std_bias: float
    std_warm10: float
    n_sites_under_2c: int


def aggregate(metrics: list[SiteMetrics] | tuple[SiteMetrics, ...]) -> MetricSummary:
    """Summarize per-site metrics across sites.

    Emits both median and mean variants of each score.  Medians are
    lower medians; standard deviations are population values across
    sites; the threshold count uses strict RMSE < 2 degrees C.
    """
    if len(metrics) == 0:
        raise ValueError("aggregate requires at least one site")
    rmse = [m.rmse for m in metrics]
    bias = [m.mean_bias for m in metrics]
    warm = [m.rmse_warm10 for m in metrics]
    return MetricSummary(
        n_sites=len(metrics),
        median_rmse=lower_median(rmse),
        median_bias=lower_median(bias),
        median_warm10=lower_median(warm),
        mean_rmse=float(np.mean(rmse)),
        mean_bias=float(np.mean(bias)),
        mean_warm10=float(np.mean(warm)),
        std_rmse=float(np.std(rmse)),
        std_bias=float(np.std(bias)),
        std_warm10=float(np.std(warm)),
        n_sites_under_2c=int(sum(1 for r in rmse if r < RMSE_THRESHOLD_C)),
    )


@dataclass(frozen=True)
class WilcoxonResult:
    """Signed-rank test outcome.

    ``p_value`` is None when every paired difference is zero; there is
    no evidence either way and callers must treat the pair as
    indistinguishable.
    """

    statistic: float
    n_nonzero: int
    p_value: float | None
    method: str

    @property
    def decided(self) -> bool:
        return self.p_value is not None


def _exact_signed_rank_p(doubled_ranks: np.ndarray, w_plus_doubled: int) -> float:
    # Distribution of W+ over all 2^n sign assignments, tabulated by
    # dynamic programming on doubled ranks so midranks stay integral.
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    denom = float(2 ** len(doubled_ranks))
    p_le = float(counts[: w_plus_doubled + 1].sum()) / denom
    p_ge = float(counts[w_plus_doubled:].sum()) / denom
    return min(1.0, 2.0 * min(p_le, p_ge))


def wilcoxon_two_sided(errors_a, errors_b) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired error magnitudes.

    Zero differences are dropped before ranking.  For n <= 25 the
    p-value comes from the exact sign-assignment distribution (valid
    under ties via midranks); larger samples use the normal
    approximation with the tie variance correction.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired error arrays must be aligned 1-D")
    d = a - b
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 0, None, "degenerate")

    mags = np.abs(d)
    order = np.argsort(mags, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sorted_mags = mags[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_mags[j + 1] == sorted_mags[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1

    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)

    if n <= EXACT_TEST_MAX_N:
        doubled = np.round(ranks * 2.0).astype(np.int64)
        p = _exact_signed_rank_p(doubled, int(round(w_plus * 2.0)))
        return WilcoxonResult(statistic, n, p, "exact")

    _, tie_counts = np.unique(mags, return_counts=True)
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts**3) - tie_counts).sum()) / 48.0
    z = (w_plus - mu) / math.sqrt(var)
    p = min(1.0, 2.0 * normal_cdf(-abs(z)))
    return WilcoxonResult(statistic, n, p, "normal")


@dataclass(frozen=True)
class SiteComparison:
    site_id: str
    p_value: float | None
    delta_rmse: float
    category: str


@dataclass(frozen=True)
class ComparisonResult:
    """Per-site significance categories against a baseline model."""

    sites: tuple[SiteComparison, ...]
    counts: dict[str, int]
    mean_delta_rmse: dict[str, float]


def compare_to_baseline(
    model_errors: dict[str, np.ndarray],
    baseline_errors: dict[str, np.ndarray],
    alpha: float = 0.05,
) -> ComparisonResult:
    """Categorize each test site by paired significance against a baseline.

    Inputs map site id to the absolute error series over the shared
    observed dates.  A site is significant when the two-sided signed-rank
    p is strictly below alpha; direction follows the sign of
    (model RMSE - baseline RMSE).  The three categories partition the
    sites.
    """
    if set(model_errors) != set(baseline_errors):
        raise ValueError("model and baseline must cover the same sites")
    rows = []
    for site_id in sorted(model_errors):
        ea = np.asarray(model_errors[site_id], dtype=np.float64)
        eb = np.asarray(baseline_errors[site_id], dtype=np.float64)
        if ea.shape != eb.shape:
            raise ValueError(f"site {site_id!r}: error series lengths differ")
        delta = float(np.sqrt(np.mean(ea * ea)) - np.sqrt(np.mean(eb * eb)))
        test = wilcoxon_two_sided(ea, eb)
        if test.decided and test.p_value < alpha and delta != 0.0:
            category = CATEGORY_BETTER if delta < 0.0 else CATEGORY_WORSE
        else:
            category = CATEGORY_NONE
        rows.append(SiteComparison(site_id, test.p_value, delta, category))

    counts = {c: 0 for c in (CATEGORY_BETTER, CATEGORY_NONE, CATEGORY_WORSE)}
    sums = {c: 0.0 for c in counts}
    for row in rows:
        counts[row.category] += 1
        sums[row.category] += row.delta_rmse
    means = {c: (sums[c] / counts[c] if counts[c] else float("nan")) for c in counts}
    return ComparisonResult(tuple(rows), counts, means)


def pooled_rmse(predictions: dict[str, np.ndarray], observed: dict[str, np.ndarray]) -> float:
    """RMSE over every observed timestep of every site, pooled."""
    total = 0.0
    count = 0
    for site_id, obs in observed.items():
        obs = np.asarray(obs, dtype=np.float64)
        pred = np.asarray(predictions[site_id], dtype=np.float64)
        keep = np.isfinite(obs)
        r = pred[keep] - obs[keep]
        total += float(r @ r)
        count += int(keep.sum())
    if count == 0:
        raise ValueError("no observations to pool")
    return math.sqrt(total / count)


def permutation_importance(
    predict,
    inputs: dict[str, np.ndarray],
    observed: dict[str, np.ndarray],
    feature_names: tuple[str, ...] | list[str],
    groups: dict[str, tuple[str, ...]],
    rng,
    repeats: int = 1,
) -> dict[str, float]:
    """Pooled-RMSE increase after shuffling a feature group.

    ``predict`` maps {site: (T, D) inputs} to {site: (T,) predictions in
    degrees C}.  For each repeat one permutation of the pooled timestep
    rows is drawn per group and applied jointly to every column in the
    group, so correlated members are disrupted together.  Importance is
    the mean over repeats of (permuted RMSE - baseline RMSE).
    """
    feature_names = tuple(feature_names)
    index = {name: i for i, name in enumerate(feature_names)}
    for group, members in groups.items():
        missing = [m for m in members if m not in index]
        if missing:
            raise ValueError(f"group {group!r} references unknown features {missing}")

    site_ids = sorted(inputs)
    lengths = [len(inputs[s]) for s in site_ids]
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    baseline = pooled_rmse(predict(inputs), observed)

    result: dict[str, float] = {}
    for group in groups:
        cols = [index[m] for m in groups[group]]
        deltas = []
        for repeat in range(repeats):
            perm = rng.child_named(f"perm:{group}:{repeat}").generator.permutation(bounds[-1])
            shuffled = {}
            for k, site_id in enumerate(site_ids):
                x = inputs[site_id].copy()
                rows = perm[bounds[k] : bounds[k + 1]]
                for col in cols:
                    pooled = np.concatenate([inputs[s][:, col] for s in site_ids])
                    x[:, col] = pooled[rows]
                shuffled[site_id] = x
            deltas.append(pooled_rmse(predict(shuffled), observed) - baseline)
        result[group] = float(np.mean(deltas))
    return result


def member_rmse_std(
    member_predictions: list[dict[str, np.ndarray]],
    observed: dict[str, np.ndarray],
) -> float:
    """Spread of pooled RMSE across ensemble members.

    Used as the reporting floor for permutation importances: group
    effects below one member standard deviation are noise.
    """
    if len(member_predictions) < 2:
        raise ValueError("need at least two members to estimate spread")
    scores = [pooled_rmse(p, observed) for p in member_predictions]
    return float(np.std(scores))


@dataclass(frozen=True)
class TemporalBreakdown:
    """Error structure in time: annual cycle and year-over-year drift."""

    day_of_year_rmse: dict[int, float]
    per_site_year_rmse: dict[str, dict[int, float]]


def temporal_breakdown(
    dates: dict[str, np.ndarray],
    predictions: dict[str, np.ndarray],
    observed: dict[str, np.ndarray],
) -> TemporalBreakdown:
    """Median-across-sites RMSE per day of year, plus per-site-per-year RMSE.

    A day-of-year entry exists only for days observed at one or more
    sites, and its value is the median over exactly the sites observed
    on that day.
    """
    per_day_site_rmse: dict[int, list[float]] = {}
    per_site_year: dict[str, dict[int, float]] = {}
    for site_id in sorted(dates):
        d, pred, obs = _validate_aligned(dates[site_id], predictions[site_id], observed[site_id])
        keep = np.isfinite(obs)
        if not keep.any():
            continue
        d, pred, obs = d[keep], pred[keep], obs[keep]
        err = pred - obs

        doy = day_of_year(d)
        for day in np.unique(doy):
            e = err[doy == day]
            per_day_site_rmse.setdefault(int(day), []).append(float(np.sqrt(np.mean(e * e))))

        years = d.astype("datetime64[Y]").astype(np.int64) + 1970
        per_site_year[site_id] = {}
        for year in np.unique(years):
            e = err[years == year]
            per_site_year[site_id][int(year)] = float(np.sqrt(np.mean(e * e)))

    day_median = {day: lower_median(vals) for day, vals in sorted(per_day_site_rmse.items())}
    return TemporalBreakdown(day_median, per_site_year)


def climatology_predictions(
    train_dates,
    train_observed,
    target_dates,
) -> np.ndarray:
    """Day-of-year mean of the training observations as a prediction.

    Target days never observed in training fall back to the overall
    training mean.  Calling with target_dates == train_dates gives the
    in-sample climatology baseline.
    """
    train_dates = np.asarray(train_dates, dtype="datetime64[D]")
    train_observed = np.asarray(train_observed, dtype=np.float64)
    keep = np.isfinite(train_observed)
    if not keep.any():
        raise ValueError("climatology needs at least one training observation")
    train_doy = day_of_year(train_dates[keep])
    values = train_observed[keep]
    overall = float(np.mean(values))
    by_day = {int(day): float(np.mean(values[train_doy == day])) for day in np.unique(train_doy)}
    target_doy = day_of_year(np.asarray(target_dates, dtype="datetime64[D]"))
    return np.array([by_day.get(int(day), overall) for day in target_doy], dtype=np.float64)
