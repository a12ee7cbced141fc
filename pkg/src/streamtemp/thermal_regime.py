"""Paired air and stream temperature regime analysis.

An annual sinusoid is fit to each series by ordinary least squares; the
water-to-air amplitude ratio and the phase lag in days then place each
site into one of four classes: atmospheric, shallow groundwater, deep
groundwater, or dammed.  Proximity to a major dam overrides the
ratio/lag rule.  The ratio/lag decision regions are mandatory
configuration: no numeric defaults ship with the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import lower_median

__all__ = [
    "PERIOD_DAYS",
    "DAM_DISTANCE_KM",
    "REGIME_DAMMED",
    "REGIME_LABELS",
    "SineFit",
    "RegimeClass",
    "RegimeRegion",
    "RegimeThresholds",
    "RegimeClassReport",
    "InsufficientSpanError",
    "fit_sine",
    "amplitude_ratio_phase_lag",
    "classify_site",
    "regime_error_report",
]

PERIOD_DAYS = 365.25
DAM_DISTANCE_KM = 25.0
MIN_FIT_OBSERVATIONS = 365

REGIME_DAMMED = "dammed"
REGIME_LABELS = ("atmospheric", "shallow_groundwater", "deep_groundwater", REGIME_DAMMED)
_REGION_LABELS = REGIME_LABELS[:3]


class InsufficientSpanError(ValueError):
    """Series too short or too sparse to support an annual fit."""


@dataclass(frozen=True)
class SineFit:
    """Annual sinusoid T(t) = mean + amplitude * sin(2*pi*t/period + phase).

    ``t`` counts days from the first observation in the fitted series.
    Amplitude is non-negative and phase lives in [0, 2*pi); a fit whose
    raw coefficients imply a negative amplitude is normalized by a
    half-turn phase shift.
    """

    mean_level: float
    amplitude: float
    phase: float
    period: float
    residual_rmse: float

    def predict(self, t_days: np.ndarray) -> np.ndarray:
        t = np.asarray(t_days, dtype=np.float64)
        return self.mean_level + self.amplitude * np.sin(2.0 * np.pi * t / self.period + self.phase)


def fit_sine(dates, values) -> SineFit:
    """Least-squares annual sinusoid through a dated series.

    Solves the 3x3 normal equations for T(t) = a0 + a1*sin(wt) + a2*cos(wt)
    with w = 2*pi/365.25 and t in days since the first observation, then
    reports amplitude sqrt(a1^2 + a2^2) and phase atan2(a2, a1).  NaN
    values are dropped before fitting.

    Raises:
        InsufficientSpanError: fewer than 365 observations, or the
            observed dates span less than one period.
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    values = np.asarray(values, dtype=np.float64)
    if dates.shape != values.shape or dates.ndim != 1:
        raise ValueError("dates and values must be aligned 1-D arrays")
    keep = np.isfinite(values)
    dates, values = dates[keep], values[keep]
    n = len(values)
    if n < MIN_FIT_OBSERVATIONS:
        raise InsufficientSpanError(f"need at least {MIN_FIT_OBSERVATIONS} observations, have {n}")
    t = (dates - dates.min()).astype(np.float64)
    if t.max() < PERIOD_DAYS:
        raise InsufficientSpanError(
            f"observations span {t.max():.1f} days, less than one {PERIOD_DAYS}-day period"
        )

    w = 2.0 * np.pi / PERIOD_DAYS
    design = np.column_stack([np.ones(n), np.sin(w * t), np.cos(w * t)])
    gram = design.T @ design
    coeffs = np.linalg.solve(gram, design.T @ values)
    a0, a1, a2 = (float(c) for c in coeffs)

    amplitude = math.hypot(a1, a2)
    phase = math.atan2(a2, a1) % (2.0 * math.pi)
    residual = design @ coeffs - values
    rmse = float(np.sqrt(np.mean(residual * residual)))
    return SineFit(a0, amplitude, phase, PERIOD_DAYS, rmse)


def amplitude_ratio_phase_lag(air: SineFit, water: SineFit) -> tuple[float, float]:
    """Water-to-air amplitude ratio and the water lag behind air in days.

    The lag is the phase deficit (air.phase - water.phase) wrapped to
    [0, 2*pi) and converted to days, so a water signal trailing air by a
    quarter cycle reports roughly 91.3 days.

    Raises:
        ValueError: the air fit has zero amplitude, which leaves the
            ratio undefined.
    """
    if air.amplitude == 0.0:
        raise ValueError("air amplitude is zero; ratio and lag are undefined")
    ratio = water.amplitude / air.amplitude
    lag = ((air.phase - water.phase) % (2.0 * math.pi)) * PERIOD_DAYS / (2.0 * math.pi)
    return ratio, lag


@dataclass(frozen=True)
class RegimeRegion:
    """Axis-aligned (ratio, lag) box; half-open on its max edges."""

    ratio_min: float
    ratio_max: float
    lag_min: float
    lag_max: float

    def __post_init__(self):
        if not (self.ratio_min < self.ratio_max and self.lag_min < self.lag_max):
            raise ValueError("region bounds must satisfy min < max on both axes")

    def contains(self, ratio: float, lag: float, ratio_hi: float, lag_hi: float) -> bool:
        # max edges are half-open except on the outer boundary of the
        # configured domain, which closes so coverage stays total
        in_ratio = self.ratio_min <= ratio and (
            ratio < self.ratio_max or (ratio == self.ratio_max == ratio_hi)
        )
        in_lag = self.lag_min <= lag and (lag < self.lag_max or (lag == self.lag_max == lag_hi))
        return in_ratio and in_lag


@dataclass(frozen=True)
class RegimeThresholds:
    """User-supplied decision regions for the three undammed classes.

    The three boxes must tile their bounding rectangle exactly: no gaps,
    no overlaps.  Validation enumerates the grid cells induced by the
    region edges and demands each cell fall in exactly one region.
    """

    regions: dict[str, RegimeRegion]

    def __post_init__(self):
        if set(self.regions) != set(_REGION_LABELS):
            raise ValueError(f"thresholds must define exactly the classes {_REGION_LABELS}")
        ratios = sorted({b for r in self.regions.values() for b in (r.ratio_min, r.ratio_max)})
        lags = sorted({b for r in self.regions.values() for b in (r.lag_min, r.lag_max)})
        for i in range(len(ratios) - 1):
            for j in range(len(lags) - 1):
                mid_r = 0.5 * (ratios[i] + ratios[i + 1])
                mid_l = 0.5 * (lags[j] + lags[j + 1])
                owners = [
                    label
                    for label, region in self.regions.items()
                    if region.ratio_min <= mid_r < region.ratio_max
                    and region.lag_min <= mid_l < region.lag_max
                ]
                if len(owners) != 1:
                    kind = "overlap" if len(owners) > 1 else "gap"
                    raise ValueError(
                        f"decision regions leave a {kind} near ratio={mid_r:.4g}, lag={mid_l:.4g}"
                    )

    @property
    def domain(self) -> tuple[float, float, float, float]:
        regions = self.regions.values()
        return (
            min(r.ratio_min for r in regions),
            max(r.ratio_max for r in regions),
            min(r.lag_min for r in regions),
            max(r.lag_max for r in regions),
        )

    def lookup(self, ratio: float, lag: float) -> str:
        ratio_lo, ratio_hi, lag_lo, lag_hi = self.domain
        if not (ratio_lo <= ratio <= ratio_hi and lag_lo <= lag <= lag_hi):
            raise ValueError(
                f"ratio={ratio:.4g}, lag={lag:.4g} falls outside the configured "
                f"domain [{ratio_lo:.4g}, {ratio_hi:.4g}] x [{lag_lo:.4g}, {lag_hi:.4g}]"
            )
        for label, region in self.regions.items():
            if region.contains(ratio, lag, ratio_hi, lag_hi):
                return label
        raise AssertionError("validated regions cannot miss an in-domain point")


@dataclass(frozen=True)
class RegimeClass:
    """Final classification with the diagnostics that produced it."""

    label: str
    amplitude_ratio: float
    phase_lag_days: float


def classify_site(
    ratio: float,
    lag_days: float,
    dam_distance_km: float | None,
    thresholds: RegimeThresholds,
) -> RegimeClass:
    """Assign one of the four regime classes.

    A site within 25 km of a major dam (inclusive) is dammed regardless
    of its ratio and lag; distance None or beyond 25 km defers to the
    configured decision regions.
    """
    if thresholds is None:
        raise ValueError("regime thresholds are mandatory configuration")
    if dam_distance_km is not None and dam_distance_km <= DAM_DISTANCE_KM:
        return RegimeClass(REGIME_DAMMED, ratio, lag_days)
    return RegimeClass(thresholds.lookup(ratio, lag_days), ratio, lag_days)


@dataclass(frozen=True)
class RegimeClassReport:
    label: str
    n_sites: int
    fraction: float
    median_rmse: float
    mean_bias: float


def regime_error_report(
    classes: dict[str, RegimeClass],
    metrics: dict[str, "SiteMetrics"],
) -> tuple[RegimeClassReport, ...]:
    """Median RMSE and mean bias per regime class.

    Empty classes are absent from the report.  Sites must appear in both
    inputs; the report rows follow the canonical label order.
    """
    if set(classes) != set(metrics):
        raise ValueError("classified sites and scored sites must match")
    rows = []
    total = len(classes)
    for label in REGIME_LABELS:
        members = [s for s, c in classes.items() if c.label == label]
        if not members:
            continue
        rmses = [metrics[s].rmse for s in members]
        biases = [metrics[s].mean_bias for s in members]
        rows.append(
            RegimeClassReport(
                label=label,
                n_sites=len(members),
                fraction=len(members) / total,
                median_rmse=lower_median(rmses),
                mean_bias=float(np.mean(biases)),
            )
        )
    return tuple(rows)
