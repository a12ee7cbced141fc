"""Site records, quality filters, feature assembly, and dataset splits.

A site's modeled axis is its driver date range: strictly increasing,
contiguous, daily.  Water temperature observations are stored on that axis
with NaN marking unobserved days, so feature tensors and masks share one
index space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "METEO_COLUMNS",
    "TEMP_MIN_C",
    "TEMP_MAX_C",
    "MIN_OBSERVATIONS",
    "DEFAULT_TRAIN_THRESHOLD",
    "SiteRecord",
    "SiteRejectedError",
    "MissingInputError",
    "InvalidAttributeError",
    "FeatureSpec",
    "DataSplit",
    "log_transform",
    "filter_observations",
    "build_dynamic_inputs",
    "transform_dam_distances",
    "split_train_test",
    "availability_group",
    "aggregate_zscore_categories",
]

# raw meteorological driver columns, in CSV order
METEO_COLUMNS = ("dayl_s", "tmax_c", "tmean_c", "tmin_c", "swe_kgm2", "vp_pa", "srad_wm2")

TEMP_MIN_C = -1.0
TEMP_MAX_C = 40.0
MIN_OBSERVATIONS = 365
DEFAULT_TRAIN_THRESHOLD = 1825

ATTRIBUTE_PREFIX = "attr:"


class SiteRejectedError(ValueError):
    """A site failed the observation quality filters."""

    def __init__(self, site_id: str, reason: str, detail: str):
        self.site_id = site_id
        self.reason = reason
        self.detail = detail
        super().__init__(f"site {site_id} rejected ({reason}): {detail}")


class MissingInputError(ValueError):
    """A requested input category is absent from the site record."""


class InvalidAttributeError(ValueError):
    """An attribute value violates its encoding rules."""


@dataclass(frozen=True)
class SiteRecord:
    """One monitoring site: location, static attributes, daily series.

    ``dates`` is a datetime64[D] axis; ``water_temp`` uses NaN for missing
    days.  ``meteo`` columns follow :data:`METEO_COLUMNS`; ``discharge`` is
    None when the site has no streamflow record.
    """

    site_id: str
    latitude: float
    longitude: float
    elevation: float
    region_code: str
    dates: np.ndarray
    water_temp: np.ndarray
    meteo: np.ndarray
    precip: np.ndarray
    discharge: np.ndarray | None = None
    attributes: dict[str, float] = field(default_factory=dict)
    cluster_id: int | None = None
    dam_distance_km: float | None = None

    def __post_init__(self):
        n = self.dates.shape[0]
        for name, arr in (("water_temp", self.water_temp), ("precip", self.precip)):
            if arr.shape[0] != n:
                raise ValueError(f"{self.site_id}: {name} length {arr.shape[0]} != {n} dates")
        if self.meteo.shape != (n, len(METEO_COLUMNS)):
            raise ValueError(f"{self.site_id}: meteo must be (n_dates, {len(METEO_COLUMNS)})")
        if self.discharge is not None and self.discharge.shape[0] != n:
            raise ValueError(f"{self.site_id}: discharge length mismatch")
        if n > 1:
            deltas = np.diff(self.dates).astype("timedelta64[D]").astype(int)
            if not np.all(deltas == 1):
                raise ValueError(f"{self.site_id}: date axis must be contiguous daily")

    @property
    def n_dates(self) -> int:
        return self.dates.shape[0]

    @property
    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.water_temp)

    @property
    def n_observed(self) -> int:
        return int(self.observed_mask.sum())

    def has_discharge(self) -> bool:
        return self.discharge is not None and not np.any(np.isnan(self.discharge))

    def without_observations(self) -> "SiteRecord":
        """Copy of this record with every water temperature removed."""
        return replace(self, water_temp=np.full(self.n_dates, np.nan))


def log_transform(values: np.ndarray) -> np.ndarray:
    """ln(1 + x), defined for the non-negative quantities it is applied to."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("log_transform requires non-negative values")
    return np.log1p(values)


def filter_observations(site: SiteRecord) -> SiteRecord:
    """Apply the observation quality gate; idempotent.

    Raises:
        SiteRejectedError: if any observed temperature lies outside
            [-1, 40] degrees C, or fewer than 365 days carry observations.
    """
    obs = site.water_temp[site.observed_mask]
    if obs.size and (obs.min() < TEMP_MIN_C or obs.max() > TEMP_MAX_C):
        bad = obs[(obs < TEMP_MIN_C) | (obs > TEMP_MAX_C)]
        raise SiteRejectedError(
            site.site_id,
            "temperature_out_of_range",
            f"{bad.size} observations outside [{TEMP_MIN_C}, {TEMP_MAX_C}] C, e.g. {bad[0]:.2f}",
        )
    if obs.size < MIN_OBSERVATIONS:
        raise SiteRejectedError(
            site.site_id,
            "too_few_observations",
            f"{obs.size} observed days < required {MIN_OBSERVATIONS}",
        )
    return site


@dataclass(frozen=True)
class FeatureSpec:
    """Which input blocks a model consumes.

    ``attribute_mode`` is one of ``none``, ``full``, ``expert``, or
    ``zscore_categories``; ``attribute_names`` holds the resolved, ordered
    names for the active mode (category names for the z-score mode).
    """

    use_meteorology: bool = True
    use_location: bool = False
    use_discharge: bool = False
    attribute_mode: str = "none"
    attribute_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.attribute_mode not in ("none", "full", "expert", "zscore_categories"):
            raise ValueError(f"unknown attribute_mode {self.attribute_mode!r}")
        if self.attribute_mode != "none" and not self.attribute_names:
            raise ValueError("attribute_names required when attributes are enabled")
        if self.attribute_mode == "none" and self.attribute_names:
            raise ValueError("attribute_names given but attribute_mode is 'none'")
        if not self.use_meteorology:
            raise ValueError("meteorological drivers are mandatory inputs")
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))

    def feature_names(self) -> tuple[str, ...]:
        """Ordered model input names: meteo, location, discharge, attributes."""
        names = list(METEO_COLUMNS) + ["prcp_mm", "log_prcp_mm"]
        if self.use_location:
            names += ["lat", "lon", "elev_m"]
        if self.use_discharge:
            names += ["discharge_cfs", "log_discharge_cfs"]
        names += [ATTRIBUTE_PREFIX + a for a in self.attribute_names]
        return tuple(names)


def build_dynamic_inputs(
    site: SiteRecord,
    spec: FeatureSpec,
    attribute_values: dict[str, float] | None = None,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Assemble the per-date input matrix for one site.

    Args:
        attribute_values: source of static attribute values; defaults to
            ``site.attributes``.  Category-aggregated tables pass their row
            here for the z-score mode.

    Returns:
        (X, names) with X of shape (n_dates, D); static blocks are repeated
        down the date axis.

    Raises:
        MissingInputError: when a required block is absent from the record.
    """
    blocks = [site.meteo, site.precip[:, None], log_transform(site.precip)[:, None]]
    if spec.use_location:
        loc = np.array([site.latitude, site.longitude, site.elevation])
        blocks.append(np.broadcast_to(loc, (site.n_dates, 3)))
    if spec.use_discharge:
        if not site.has_discharge():
            raise MissingInputError(f"site {site.site_id} has no complete discharge record")
        blocks.append(site.discharge[:, None])
        blocks.append(log_transform(site.discharge)[:, None])
    if spec.attribute_mode != "none":
        values = site.attributes if attribute_values is None else attribute_values
        missing = [a for a in spec.attribute_names if a not in values]
        if missing:
            raise MissingInputError(f"site {site.site_id} lacks attributes: {missing}")
        row = np.array([float(values[a]) for a in spec.attribute_names])
        blocks.append(np.broadcast_to(row, (site.n_dates, row.size)))
    x = np.ascontiguousarray(np.hstack(blocks), dtype=np.float64)
    if np.any(np.isnan(x)):
        raise MissingInputError(f"site {site.site_id} has NaN driver values")
    return x, spec.feature_names()


def transform_dam_distances(attributes: dict[str, float], names) -> dict[str, float]:
    """Recode dam-distance attributes to inverse distance.

    The sentinel -999 (no dam) maps to 0, positive distances d map to 1/d,
    and an exact 0 stays 0.  Any other negative value is invalid.
    """
    out = dict(attributes)
    for name in names:
        if name not in out:
            raise InvalidAttributeError(f"dam-distance attribute {name!r} absent")
        v = float(out[name])
        if v == -999.0:
            out[name] = 0.0
        elif v > 0.0:
            out[name] = 1.0 / v
        elif v == 0.0:
            out[name] = 0.0
        else:
            raise InvalidAttributeError(f"{name}={v} is negative and not the -999 sentinel")
    return out


@dataclass(frozen=True)
class DataSplit:
    """Training/test partition by observation count."""

    training_site_ids: tuple[str, ...]
    test_site_ids: tuple[str, ...]
    threshold_dates: int


def split_train_test(sites, threshold_dates: int = DEFAULT_TRAIN_THRESHOLD) -> DataSplit:
    """Partition filtered sites: >= threshold observed dates trains, the rest test.

    Sites must already satisfy the observation filter (>= 365 observed days).
    """
    train, test = [], []
    for site in sorted(sites, key=lambda s: s.site_id):
        n = site.n_observed
        if n < MIN_OBSERVATIONS:
            raise ValueError(f"site {site.site_id} has {n} observed days; filter before splitting")
        (train if n >= threshold_dates else test).append(site.site_id)
    return DataSplit(tuple(train), tuple(test), threshold_dates)


def availability_group(sites, spec: FeatureSpec, required_attributes=None) -> list[str]:
    """Site ids possessing every input category the spec requires.

    ``required_attributes`` overrides the attribute names to check (used by
    the z-score mode, whose spec names categories rather than raw columns).
    """
    needed = spec.attribute_names if required_attributes is None else tuple(required_attributes)
    out = []
    for site in sorted(sites, key=lambda s: s.site_id):
        if spec.use_discharge and not site.has_discharge():
            continue
        if spec.attribute_mode != "none" and any(a not in site.attributes for a in needed):
            continue
        out.append(site.site_id)
    return out


def aggregate_zscore_categories(
    attributes_by_site: dict[str, dict[str, float]],
    category_map: dict[str, str],
) -> tuple[dict[str, dict[str, float]], tuple[str, ...]]:
    """Average per-attribute z-scores within named categories.

    Each attribute is standardized across sites (population std); a site's
    category value is the mean of its member attributes' z-scores.  Zero
    variance attributes are excluded with a warning; a category losing all
    members is dropped with a warning.

    Returns:
        (values_by_site, category_names) with category names sorted.
    """
    if not attributes_by_site:
        raise ValueError("no sites given")
    site_ids = sorted(attributes_by_site)
    attr_names = sorted(category_map)
    for sid in site_ids:
        missing = [a for a in attr_names if a not in attributes_by_site[sid]]
        if missing:
            raise MissingInputError(f"site {sid} lacks attributes for aggregation: {missing}")
    matrix = np.array([[float(attributes_by_site[s][a]) for a in attr_names] for s in site_ids])
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    kept_cols = []
    for j, name in enumerate(attr_names):
        if std[j] == 0.0:
            warnings.warn(f"attribute {name!r} has zero variance; excluded from category aggregation")
        else:
            kept_cols.append(j)
    z = np.zeros_like(matrix)
    for j in kept_cols:
        z[:, j] = (matrix[:, j] - mean[j]) / std[j]
    categories = sorted(set(category_map.values()))
    members = {
        c: [j for j in kept_cols if category_map[attr_names[j]] == c] for c in categories
    }
    final_categories = []
    for c in categories:
        if not members[c]:
            warnings.warn(f"category {c!r} has no usable attributes; dropped")
        else:
            final_categories.append(c)
    values_by_site: dict[str, dict[str, float]] = {}
    for i, sid in enumerate(site_ids):
        values_by_site[sid] = {
            c: float(np.mean([z[i, j] for j in members[c]])) for c in final_categories
        }
    return values_by_site, tuple(final_categories)
