"""Bottom-up transfer learning for unmonitored prediction.

Four stages: train one small ensemble per monitored site on that site's
data alone; score every ensemble on every other site to fill a pairwise
transfer matrix; train a boosted-tree metamodel that predicts those
transfer errors from site-difference features; and for an unmonitored
target, average the ensembles of the sources the metamodel ranks best.

Source models consume only per-day drivers (meteorology plus streamflow,
11 inputs).  Static attributes would be constant within a single-site
training set, so they carry no signal here; they enter instead through
the metamodel's difference features.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data_model import FeatureSpec, SiteRecord, build_dynamic_inputs
from .evaluate import day_of_year
from .gbrt import FeatureMatrix, GbrtConfig, GbrtModel, fit_gbrt, rfe_cv
from .lstm import LstmConfig
from .numerics import Rng, sample_excess_kurtosis, sample_skewness
from .trainer import (
    ALL_PRESET_FIELDS,
    HYPERPARAMETER_PRESETS,
    EnsembleModel,
    TrainConfig,
    prepare_site,
    train_ensemble,
)

__all__ = [
    "SOURCE_FEATURE_SPEC",
    "METAMODEL_CONFIG",
    "TOP_K_SOURCES",
    "TransferMatrix",
    "MetaModel",
    "UnmonitoredPrediction",
    "train_source_models",
    "build_transfer_matrix",
    "build_meta_features",
    "meta_feature_names",
    "train_metamodel",
    "predict_unmonitored",
]

SOURCE_FEATURE_SPEC = FeatureSpec(use_meteorology=True, use_discharge=True)

# tuned metamodel: selected by hyperparameter search on the pairwise
# transfer errors, applied after recursive feature elimination
METAMODEL_CONFIG = GbrtConfig(estimators=152, learning_rate=0.183, max_depth=6)

TOP_K_SOURCES = 10

# astronomical season starts as aligned day-of-year ordinals
# (Mar 20, Jun 21, Sep 22, Dec 21); leap day belongs to winter
_SPRING, _SUMMER, _AUTUMN, _WINTER = 79, 172, 265, 355

_LOCATION_FIELDS = (("lat", "latitude"), ("lon", "longitude"), ("elev_m", "elevation"))

_OBS_STAT_NAMES = (
    "src:n_obs",
    "src:n_dates",
    "src:n_winter",
    "src:n_spring",
    "src:n_summer",
    "src:n_autumn",
    "src:obs_mean",
    "src:obs_q05",
    "src:obs_q25",
    "src:obs_q75",
    "src:obs_q95",
    "src:obs_min",
    "src:obs_max",
    "src:obs_std",
    "src:obs_skew",
    "src:obs_kurtosis",
)


def train_source_models(
    sites: list[SiteRecord],
    lstm_config: LstmConfig,
    train_config: TrainConfig,
    rng: Rng,
    n_members: int = 5,
    presets=HYPERPARAMETER_PRESETS,
    preset_fields=ALL_PRESET_FIELDS,
    parallel_map=None,
) -> tuple[dict[str, EnsembleModel], dict[str, str]]:
    """One ensemble per monitored site, trained on that site alone.

    Each site draws its member seeds from a child stream keyed by its id,
    so the result is independent of site ordering and of which other
    sites are present.  Sites whose training fails are returned in the
    failure map instead of aborting the batch.
    """
    ordered = sorted(sites, key=lambda s: s.site_id)
    names = SOURCE_FEATURE_SPEC.feature_names()

    def build(site: SiteRecord):
        try:
            data = [prepare_site(site, SOURCE_FEATURE_SPEC)]
            model = train_ensemble(
                data,
                names,
                lstm_config,
                train_config,
                rng.child_named(f"source:{site.site_id}"),
                n_members=n_members,
                presets=presets,
                preset_fields=preset_fields,
            )
            return site.site_id, model, None
        except Exception as exc:  # noqa: BLE001 - per-site isolation is the contract
            return site.site_id, None, f"{type(exc).__name__}: {exc}"

    mapper = parallel_map if parallel_map is not None else lambda fn, items: [fn(i) for i in items]
    models: dict[str, EnsembleModel] = {}
    failures: dict[str, str] = {}
    for site_id, model, error in mapper(build, ordered):
        if model is not None:
            models[site_id] = model
        else:
            failures[site_id] = error
    return models, failures


@dataclass(frozen=True)
class TransferMatrix:
    """Pairwise cross-site errors: (source_id, target_id) -> RMSE in C."""

    entries: dict[tuple[str, str], float]

    def __post_init__(self):
        for (src, tgt), value in self.entries.items():
            if src == tgt:
                raise ValueError(f"diagonal entry {src!r} not allowed")
            if not (value >= 0.0):
                raise ValueError(f"negative or NaN RMSE for ({src}, {tgt})")

    @property
    def n_entries(self) -> int:
        return len(self.entries)

    def rmse(self, source_id: str, target_id: str) -> float:
        return self.entries[(source_id, target_id)]

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source_id", "target_id", "rmse"])
            for (src, tgt) in sorted(self.entries):
                writer.writerow([src, tgt, repr(self.entries[(src, tgt)])])

    @classmethod
    def load_csv(cls, path) -> "TransferMatrix":
        entries = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                entries[(row["source_id"], row["target_id"])] = float(row["rmse"])
        return cls(entries)


def build_transfer_matrix(
    models: dict[str, EnsembleModel],
    sites: list[SiteRecord],
    parallel_map=None,
) -> TransferMatrix:
    """Score every source ensemble on every other training site.

    Target water temperatures are read only to compute the RMSE; inputs
    pass through each source's own normalizer inside its ensemble.  The
    result has exactly N*(N-1) entries for the N sites that have models.
    """
    by_id = {s.site_id: s for s in sites}
    site_ids = sorted(set(models) & set(by_id))
    inputs = {
        sid: build_dynamic_inputs(by_id[sid], SOURCE_FEATURE_SPEC)[0] for sid in site_ids
    }

    def score(pair):
        src, tgt = pair
        target = by_id[tgt]
        pred = models[src].predict_series(inputs[tgt])
        obs = target.water_temp
        keep = ~np.isnan(obs)
        err = pred[keep] - obs[keep]
        return (src, tgt), float(np.sqrt(np.mean(err * err)))

    pairs = [(s, t) for s in site_ids for t in site_ids if s != t]
    mapper = parallel_map if parallel_map is not None else lambda fn, items: [fn(i) for i in items]
    return TransferMatrix(dict(mapper(score, pairs)))


def meta_feature_names(attribute_names: tuple[str, ...]) -> tuple[str, ...]:
    """Ordered names for the pairwise feature vector."""
    names = [f"diff:{short}" for short, _ in _LOCATION_FIELDS]
    names += [f"diff:attr:{a}" for a in attribute_names]
    names += list(_OBS_STAT_NAMES)
    for col in SOURCE_FEATURE_SPEC.feature_names():
        names += [f"diff:mean:{col}", f"diff:std:{col}"]
    return tuple(names)


def _source_observation_stats(site: SiteRecord) -> list[float]:
    obs = site.water_temp[site.observed_mask]
    dates = site.dates[site.observed_mask]
    doy = day_of_year(dates)
    winter = (doy < _SPRING) | (doy >= _WINTER) | (doy == 366)
    spring = (doy >= _SPRING) & (doy < _SUMMER)
    summer = (doy >= _SUMMER) & (doy < _AUTUMN)
    autumn = (doy >= _AUTUMN) & (doy < _WINTER)
    q05, q25, q75, q95 = np.quantile(obs, [0.05, 0.25, 0.75, 0.95])
    return [
        float(len(obs)),
        float(len(np.unique(dates))),
        float(winter.sum()),
        float(spring.sum()),
        float(summer.sum()),
        float(autumn.sum()),
        float(np.mean(obs)),
        float(q05),
        float(q25),
        float(q75),
        float(q95),
        float(np.min(obs)),
        float(np.max(obs)),
        float(np.std(obs)),
        sample_skewness(obs),
        sample_excess_kurtosis(obs),
    ]


def build_meta_features(
    source: SiteRecord,
    target: SiteRecord,
    attribute_names: tuple[str, ...],
) -> np.ndarray:
    """Pairwise feature vector describing a source/target site pair.

    Three blocks: static differences (source minus target) over location
    and the given attributes; the source's own observation statistics
    (the target's water temperatures are never touched); and differences
    of per-driver mean and standard deviation.

    Raises:
        ValueError: either site lacks one of the named attributes.
    """
    values: list[float] = []
    for _, field in _LOCATION_FIELDS:
        values.append(float(getattr(source, field)) - float(getattr(target, field)))
    for name in attribute_names:
        if name not in source.attributes or name not in target.attributes:
            raise ValueError(f"attribute {name!r} missing on {source.site_id!r} or {target.site_id!r}")
        values.append(float(source.attributes[name]) - float(target.attributes[name]))

    values += _source_observation_stats(source)

    x_src = build_dynamic_inputs(source, SOURCE_FEATURE_SPEC)[0]
    x_tgt = build_dynamic_inputs(target, SOURCE_FEATURE_SPEC)[0]
    for col in range(x_src.shape[1]):
        values.append(float(np.mean(x_src[:, col]) - np.mean(x_tgt[:, col])))
        values.append(float(np.std(x_src[:, col]) - np.std(x_tgt[:, col])))
    return np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class MetaModel:
    """Transfer-error predictor over pairwise feature vectors."""

    model: GbrtModel
    all_feature_names: tuple[str, ...]
    selected: tuple[str, ...]

    def predict(self, vectors: np.ndarray) -> np.ndarray:
        """Predict RMSE for rows laid out as ``all_feature_names``."""
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        index = {n: i for i, n in enumerate(self.all_feature_names)}
        cols = [index[n] for n in self.selected]
        return self.model.predict(vectors[:, cols])


def train_metamodel(
    matrix: TransferMatrix,
    features: dict[tuple[str, str], np.ndarray],
    feature_names: tuple[str, ...],
    rng: Rng,
    selection_config: GbrtConfig | None = None,
    final_config: GbrtConfig = METAMODEL_CONFIG,
) -> MetaModel:
    """Fit the transfer-error regressor.

    Recursive feature elimination with cross-validation first prunes the
    candidate features, then the final model trains on the survivors
    with the tuned configuration.  Rows are the transfer-matrix pairs.
    """
    pairs = sorted(matrix.entries)
    missing = [p for p in pairs if p not in features]
    if missing:
        raise ValueError(f"missing feature vectors for {len(missing)} pairs, first {missing[0]}")
    x = np.vstack([features[p] for p in pairs])
    y = np.array([matrix.entries[p] for p in pairs])
    data = FeatureMatrix(tuple(feature_names), x, y)

    if selection_config is None:
        selection_config = GbrtConfig()
    if np.ptp(y) == 0.0:
        # constant transfer error: nothing to select on, fit the constant
        selected = tuple(feature_names[:1])
    else:
        selected = rfe_cv(data, selection_config, rng.child_named("rfe")).selected
    model = fit_gbrt(data.select(selected), final_config)
    return MetaModel(model=model, all_feature_names=tuple(feature_names), selected=selected)


@dataclass(frozen=True)
class UnmonitoredPrediction:
    site_id: str
    predictions_c: np.ndarray
    chosen_sources: tuple[str, ...]
    predicted_rmse: dict[str, float]


def predict_unmonitored(
    target: SiteRecord,
    metamodel: MetaModel,
    models: dict[str, EnsembleModel],
    source_sites: dict[str, SiteRecord],
    attribute_names: tuple[str, ...],
    k: int = TOP_K_SOURCES,
) -> UnmonitoredPrediction:
    """Predict a site that has no water-temperature record.

    The metamodel ranks every source by its predicted transfer RMSE; the
    best min(k, N) source ensembles are averaged (mean of ensemble
    means).  The target's water temperatures are structurally out of
    reach: the record is stripped of them on entry.
    """
    if not models:
        raise ValueError("no trained source models")
    target = target.without_observations()

    source_ids = sorted(set(models) & set(source_sites))
    if not source_ids:
        raise ValueError("no source site records match the trained models")
    vectors = np.vstack(
        [build_meta_features(source_sites[sid], target, attribute_names) for sid in source_ids]
    )
    predicted = metamodel.predict(vectors)
    order = np.argsort(predicted, kind="stable")
    chosen = tuple(source_ids[i] for i in order[: min(k, len(source_ids))])

    x_target = build_dynamic_inputs(target, SOURCE_FEATURE_SPEC)[0]
    stack = np.stack([models[sid].predict_series(x_target) for sid in chosen])
    return UnmonitoredPrediction(
        site_id=target.site_id,
        predictions_c=stack.mean(axis=0),
        chosen_sources=chosen,
        predicted_rmse={sid: float(predicted[i]) for i, sid in enumerate(source_ids)},
    )
