"""Experiment assembly.

Three protocols built from the training and transfer machinery:

* approach comparison: one model for all sites (top-down), one model per
  region or per cluster (grouped), and per-site transfer (bottom-up);
* input-availability matrix: four nested feature sets, each trained on
  the canonical pool and on the extended pool of every site possessing
  those inputs;
* attribute-set variants: full, expert-selected, and z-score-aggregated
  static attributes.

Every run in a comparison shares the canonical test set.  A test site
that lacks a plan's required inputs, or whose group has no trained
model, is reported as unpredicted rather than silently dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data_model import (
    DataSplit,
    FeatureSpec,
    SiteRecord,
    aggregate_zscore_categories,
    availability_group,
    build_dynamic_inputs,
)
from .lstm import LstmConfig
from .mtl import (
    SOURCE_FEATURE_SPEC,
    build_meta_features,
    build_transfer_matrix,
    meta_feature_names,
    predict_unmonitored,
    train_metamodel,
    train_source_models,
)
from .numerics import Rng
from .trainer import (
    ALL_PRESET_FIELDS,
    HYPERPARAMETER_PRESETS,
    EnsembleModel,
    TrainConfig,
    prepare_site,
    train_ensemble,
)

__all__ = [
    "APPROACH_TOPDOWN",
    "APPROACH_REGIONAL",
    "APPROACH_CLUSTER",
    "APPROACH_MTL",
    "POOL_DEFAULT",
    "POOL_EXTENDED",
    "ExperimentPlan",
    "RunSettings",
    "GroupedModelSet",
    "ApproachResult",
    "canonical_feature_spec",
    "resolve_attribute_values",
    "run_topdown",
    "run_grouped",
    "run_mtl",
    "run_approach",
    "run_experiment1",
    "run_experiment2_matrix",
    "run_experiment3_variants",
]

APPROACH_TOPDOWN = "topdown"
APPROACH_REGIONAL = "grouped_regional"
APPROACH_CLUSTER = "grouped_cluster"
APPROACH_MTL = "mtl"
_APPROACHES = (APPROACH_TOPDOWN, APPROACH_REGIONAL, APPROACH_CLUSTER, APPROACH_MTL)

POOL_DEFAULT = "default"
POOL_EXTENDED = "extended"


@dataclass(frozen=True)
class ExperimentPlan:
    """One labeled model run."""

    label: str
    approach: str
    feature_spec: FeatureSpec
    training_pool: str = POOL_DEFAULT
    ensemble_size: int = 5

    def __post_init__(self):
        if self.approach not in _APPROACHES:
            raise ValueError(f"unknown approach {self.approach!r}")
        if self.training_pool not in (POOL_DEFAULT, POOL_EXTENDED):
            raise ValueError(f"unknown training pool {self.training_pool!r}")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")


@dataclass
class RunSettings:
    """Desk-to-paper scaling knobs shared by every run in a session."""

    lstm_config: LstmConfig = field(default_factory=LstmConfig)
    train_config: TrainConfig = field(default_factory=TrainConfig)
    presets: tuple = HYPERPARAMETER_PRESETS
    preset_fields: tuple = ALL_PRESET_FIELDS
    mtl_top_k: int = 10
    parallel_map: object = None


def canonical_feature_spec(attribute_names: tuple[str, ...]) -> FeatureSpec:
    """The full-input configuration: meteorology, location, flow, attributes."""
    mode = "full" if attribute_names else "none"
    return FeatureSpec(
        use_meteorology=True,
        use_location=True,
        use_discharge=True,
        attribute_mode=mode,
        attribute_names=tuple(attribute_names),
    )


def resolve_attribute_values(
    sites: list[SiteRecord],
    spec: FeatureSpec,
    category_map: dict[str, str] | None = None,
) -> dict[str, dict[str, float]] | None:
    """Per-site attribute rows for the spec's attribute mode.

    Returns None when records' own attributes apply directly.  The
    z-score mode aggregates over every site in the run universe that
    carries all mapped attributes, so category values are comparable
    across training and test sites.
    """
    if spec.attribute_mode != "zscore_categories":
        return None
    if not category_map:
        raise ValueError("z-score attribute mode requires a category map")
    eligible = {
        s.site_id: s.attributes
        for s in sites
        if all(a in s.attributes for a in category_map)
    }
    if not eligible:
        raise ValueError("no site carries every attribute named in the category map")
    values, names = aggregate_zscore_categories(eligible, category_map)
    missing = [n for n in spec.attribute_names if n not in names]
    if missing:
        raise ValueError(f"category map does not produce categories {missing}")
    return values


def _site_has_inputs(site, spec, attribute_values) -> bool:
    if spec.use_discharge and not site.has_discharge():
        return False
    if spec.attribute_mode != "none":
        if attribute_values is not None:
            row = attribute_values.get(site.site_id)
            if row is None:
                return False
        else:
            row = site.attributes
        if any(a not in row for a in spec.attribute_names):
            return False
    return True


def _attribute_row(attribute_values, site_id):
    return None if attribute_values is None else attribute_values[site_id]


@dataclass
class GroupedModelSet:
    """One ensemble per group plus the test-site routing table."""

    models: dict[str, EnsembleModel]
    routing: dict[str, str]

    def model_for(self, site_id: str) -> EnsembleModel | None:
        group = self.routing.get(site_id)
        return self.models.get(group) if group is not None else None


@dataclass
class ApproachResult:
    """Predictions and provenance for one labeled run."""

    label: str
    approach: str
    feature_names: tuple[str, ...]
    predictions: dict[str, np.ndarray]
    unpredicted: tuple[str, ...]
    training_site_count: int
    group_training_counts: dict[str, int] | None = None
    chosen_sources: dict[str, tuple[str, ...]] | None = None
    feature_spec: FeatureSpec | None = None
    attribute_values: dict[str, dict[str, float]] | None = None
    _ensemble: EnsembleModel | None = None
    _grouped: GroupedModelSet | None = None

    def test_inputs(self, sites) -> dict[str, np.ndarray]:
        """Raw input matrices for every predicted site, in this run's layout."""
        if self.feature_spec is None:
            raise ValueError("run carries no feature spec")
        by_id = {s.site_id: s for s in sites}
        out = {}
        for sid in sorted(self.predictions):
            row = None if self.attribute_values is None else self.attribute_values[sid]
            x, _ = build_dynamic_inputs(by_id[sid], self.feature_spec, row)
            out[sid] = x
        return out

    def predict_map(self, inputs_by_site: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Re-predict arbitrary raw inputs; used by permutation importance."""
        if self._ensemble is not None:
            return {sid: self._ensemble.predict_series(x) for sid, x in inputs_by_site.items()}
        if self._grouped is not None:
            out = {}
            for sid, x in inputs_by_site.items():
                model = self._grouped.model_for(sid)
                if model is None:
                    raise ValueError(f"site {sid!r} has no routed model")
                out[sid] = model.predict_series(x)
            return out
        raise ValueError(f"{self.approach} runs do not support re-prediction")

    def member_prediction_maps(
        self, inputs_by_site: dict[str, np.ndarray]
    ) -> list[dict[str, np.ndarray]]:
        """Per-member prediction tables, aligning member k across groups."""
        if self._ensemble is not None:
            stacks = {sid: self._ensemble.member_predictions(x) for sid, x in inputs_by_site.items()}
            n = self._ensemble.size
        elif self._grouped is not None:
            stacks, sizes = {}, set()
            for sid, x in inputs_by_site.items():
                model = self._grouped.model_for(sid)
                if model is None:
                    raise ValueError(f"site {sid!r} has no routed model")
                stacks[sid] = model.member_predictions(x)
                sizes.add(model.size)
            if len(sizes) != 1:
                raise ValueError("group ensembles have unequal member counts")
            n = sizes.pop()
        else:
            raise ValueError(f"{self.approach} runs do not expose members")
        return [{sid: stack[k] for sid, stack in stacks.items()} for k in range(n)]


def _resolve_pool(plan, sites, split, attribute_values):
    """Training site ids for the plan's pool; test set never changes."""
    by_id = {s.site_id: s for s in sites}
    if plan.training_pool == POOL_DEFAULT:
        candidates = [by_id[sid] for sid in split.training_site_ids]
    else:
        test_ids = set(split.test_site_ids)
        candidates = [s for s in sorted(sites, key=lambda s: s.site_id) if s.site_id not in test_ids]
    if attribute_values is None:
        return availability_group(candidates, plan.feature_spec)
    # aggregated modes: availability is membership in the resolved table,
    # not possession of the raw attribute columns
    available = availability_group(candidates, plan.feature_spec, required_attributes=())
    return [sid for sid in available if sid in attribute_values]


def _train_pool_ensemble(plan, pool_sites, attribute_values, settings, rng):
    names = plan.feature_spec.feature_names()
    data = [
        prepare_site(s, plan.feature_spec, _attribute_row(attribute_values, s.site_id))
        for s in pool_sites
    ]
    return train_ensemble(
        data,
        names,
        settings.lstm_config,
        settings.train_config,
        rng,
        n_members=plan.ensemble_size,
        presets=settings.presets,
        preset_fields=settings.preset_fields,
        parallel_map=settings.parallel_map,
    )


def _predict_tests(model_for, plan, sites, split, attribute_values):
    by_id = {s.site_id: s for s in sites}
    predictions, unpredicted = {}, []
    for sid in split.test_site_ids:
        site = by_id[sid]
        model = model_for(sid)
        if model is None or not _site_has_inputs(site, plan.feature_spec, attribute_values):
            unpredicted.append(sid)
            continue
        x, _ = build_dynamic_inputs(site, plan.feature_spec, _attribute_row(attribute_values, sid))
        predictions[sid] = model.predict_series(x)
    return predictions, tuple(unpredicted)


def run_topdown(
    plan: ExperimentPlan,
    sites: list[SiteRecord],
    split: DataSplit,
    settings: RunSettings,
    rng: Rng,
    category_map: dict[str, str] | None = None,
) -> ApproachResult:
    """One ensemble over the whole training pool, applied to every test site."""
    attribute_values = resolve_attribute_values(sites, plan.feature_spec, category_map)
    by_id = {s.site_id: s for s in sites}
    pool_ids = _resolve_pool(plan, sites, split, attribute_values)
    if not pool_ids:
        raise ValueError(f"plan {plan.label!r}: empty training pool")
    pool_sites = [by_id[sid] for sid in pool_ids]
    ensemble = _train_pool_ensemble(
        plan, pool_sites, attribute_values, settings, rng.child_named(f"{plan.label}:topdown")
    )
    predictions, unpredicted = _predict_tests(
        lambda sid: ensemble, plan, sites, split, attribute_values
    )
    return ApproachResult(
        label=plan.label,
        approach=APPROACH_TOPDOWN,
        feature_names=plan.feature_spec.feature_names(),
        predictions=predictions,
        unpredicted=unpredicted,
        training_site_count=len(pool_ids),
        feature_spec=plan.feature_spec,
        attribute_values=attribute_values,
        _ensemble=ensemble,
    )


def _group_label(site: SiteRecord, label_field: str) -> str | None:
    if label_field == "region":
        return site.region_code
    if site.cluster_id is None:
        return None
    return str(site.cluster_id)


def run_grouped(
    plan: ExperimentPlan,
    sites: list[SiteRecord],
    split: DataSplit,
    settings: RunSettings,
    rng: Rng,
    label_field: str,
    category_map: dict[str, str] | None = None,
) -> ApproachResult:
    """One ensemble per group; test sites predicted only by their group's model.

    Groups with zero available training sites yield unpredicted test
    sites.  A test site with no label at all is an error: routing must
    be total.
    """
    if label_field not in ("region", "cluster"):
        raise ValueError("label_field must be 'region' or 'cluster'")
    attribute_values = resolve_attribute_values(sites, plan.feature_spec, category_map)
    by_id = {s.site_id: s for s in sites}
    pool_ids = _resolve_pool(plan, sites, split, attribute_values)

    groups: dict[str, list[SiteRecord]] = {}
    for sid in pool_ids:
        label = _group_label(by_id[sid], label_field)
        if label is None:
            raise ValueError(f"training site {sid!r} lacks a {label_field} label")
        groups.setdefault(label, []).append(by_id[sid])

    routing = {}
    for sid in split.test_site_ids:
        label = _group_label(by_id[sid], label_field)
        if label is None:
            raise ValueError(f"test site {sid!r} lacks a {label_field} label")
        routing[sid] = label

    models = {
        label: _train_pool_ensemble(
            plan, members, attribute_values, settings, rng.child_named(f"{plan.label}:group:{label}")
        )
        for label, members in sorted(groups.items())
    }
    grouped = GroupedModelSet(models=models, routing=routing)
    predictions, unpredicted = _predict_tests(
        grouped.model_for, plan, sites, split, attribute_values
    )
    return ApproachResult(
        label=plan.label,
        approach=plan.approach,
        feature_names=plan.feature_spec.feature_names(),
        predictions=predictions,
        unpredicted=unpredicted,
        training_site_count=len(pool_ids),
        group_training_counts={label: len(members) for label, members in sorted(groups.items())},
        feature_spec=plan.feature_spec,
        attribute_values=attribute_values,
        _grouped=grouped,
    )


def run_mtl(
    plan: ExperimentPlan,
    sites: list[SiteRecord],
    split: DataSplit,
    settings: RunSettings,
    rng: Rng,
) -> ApproachResult:
    """Bottom-up transfer: per-site sources, metamodel ranking, top-k average.

    Meta features use the attributes common to every participating site,
    so the pairwise vectors are always complete.
    """
    by_id = {s.site_id: s for s in sites}
    source_ids = availability_group(
        [by_id[sid] for sid in split.training_site_ids], SOURCE_FEATURE_SPEC
    )
    if not source_ids:
        raise ValueError(f"plan {plan.label!r}: no training site has the source inputs")
    source_sites = [by_id[sid] for sid in source_ids]

    models, failures = train_source_models(
        source_sites,
        settings.lstm_config,
        settings.train_config,
        rng.child_named(f"{plan.label}:sources"),
        n_members=plan.ensemble_size,
        presets=settings.presets,
        preset_fields=settings.preset_fields,
        parallel_map=settings.parallel_map,
    )
    if not models:
        raise ValueError(f"plan {plan.label!r}: every source model failed: {failures}")
    trained_sites = [s for s in source_sites if s.site_id in models]

    predictable = [
        sid for sid in split.test_site_ids if _site_has_inputs(by_id[sid], SOURCE_FEATURE_SPEC, None)
    ]
    participants = trained_sites + [by_id[sid] for sid in predictable]
    attr_sets = [set(s.attributes) for s in participants]
    common_attrs = tuple(sorted(set.intersection(*attr_sets))) if attr_sets else ()

    matrix = build_transfer_matrix(models, trained_sites, parallel_map=settings.parallel_map)
    names = meta_feature_names(common_attrs)
    features = {
        (src, tgt): build_meta_features(by_id[src], by_id[tgt], common_attrs)
        for src, tgt in matrix.entries
    }
    metamodel = train_metamodel(matrix, features, names, rng.child_named(f"{plan.label}:metamodel"))

    source_records = {s.site_id: s for s in trained_sites}
    predictions, chosen = {}, {}
    unpredicted = [sid for sid in split.test_site_ids if sid not in predictable]
    for sid in predictable:
        result = predict_unmonitored(
            by_id[sid].without_observations(),
            metamodel,
            models,
            source_records,
            common_attrs,
            k=settings.mtl_top_k,
        )
        predictions[sid] = result.predictions_c
        chosen[sid] = result.chosen_sources
    return ApproachResult(
        label=plan.label,
        approach=APPROACH_MTL,
        feature_names=SOURCE_FEATURE_SPEC.feature_names(),
        predictions=predictions,
        unpredicted=tuple(unpredicted),
        training_site_count=len(trained_sites),
        chosen_sources=chosen,
        feature_spec=SOURCE_FEATURE_SPEC,
    )


def run_approach(
    plan: ExperimentPlan,
    sites: list[SiteRecord],
    split: DataSplit,
    settings: RunSettings,
    rng: Rng,
    category_map: dict[str, str] | None = None,
) -> ApproachResult:
    """Dispatch a plan to its approach runner."""
    if plan.approach == APPROACH_TOPDOWN:
        return run_topdown(plan, sites, split, settings, rng, category_map)
    if plan.approach == APPROACH_REGIONAL:
        return run_grouped(plan, sites, split, settings, rng, "region", category_map)
    if plan.approach == APPROACH_CLUSTER:
        return run_grouped(plan, sites, split, settings, rng, "cluster", category_map)
    return run_mtl(plan, sites, split, settings, rng)


def run_experiment1(
    sites: list[SiteRecord],
    split: DataSplit,
    settings: RunSettings,
    rng: Rng,
    feature_spec: FeatureSpec,
    ensemble_size: int = 5,
    include_cluster: bool = True,
) -> dict[str, ApproachResult]:
    """Approach comparison on a shared feature spec and test set."""
    plans = [
        ExperimentPlan("topdown", APPROACH_TOPDOWN, feature_spec, ensemble_size=ensemble_size),
        ExperimentPlan("grouped_regional", APPROACH_REGIONAL, feature_spec, ensemble_size=ensemble_size),
    ]
    if include_cluster:
        plans.append(
            ExperimentPlan("grouped_cluster", APPROACH_CLUSTER, feature_spec, ensemble_size=ensemble_size)
        )
    plans.append(
        ExperimentPlan("mtl", APPROACH_MTL, SOURCE_FEATURE_SPEC, ensemble_size=ensemble_size)
    )
    return {plan.label: run_approach(plan, sites, split, settings, rng) for plan in plans}


def _experiment2_specs(attribute_names: tuple[str, ...]) -> dict[str, FeatureSpec]:
    mode = "full" if attribute_names else "none"
    return {
        "meteo": FeatureSpec(),
        "meteo_location": FeatureSpec(use_location=True),
        "meteo_location_flow": FeatureSpec(use_location=True, use_discharge=True),
        "meteo_location_attrs": FeatureSpec(
            use_location=True, attribute_mode=mode, attribute_names=tuple(attribute_names)
        ),
    }


def run_experiment2_matrix(
    sites: list[SiteRecord],
    split: DataSplit,
    settings: RunSettings,
    rng: Rng,
    attribute_names: tuple[str, ...],
    ensemble_size: int = 5,
) -> dict[str, ApproachResult]:
    """Four nested feature sets, each on the default and the extended pool.

    The extended pool admits every non-test site possessing the spec's
    inputs; the test set is pinned to the canonical split.  A top-down
    full-input run on the default pool serves as the shared baseline.
    """
    results = {}
    baseline_plan = ExperimentPlan(
        "baseline", APPROACH_TOPDOWN, canonical_feature_spec(attribute_names),
        ensemble_size=ensemble_size,
    )
    results["baseline"] = run_topdown(baseline_plan, sites, split, settings, rng)
    for spec_name, spec in _experiment2_specs(attribute_names).items():
        for pool in (POOL_DEFAULT, POOL_EXTENDED):
            label = f"{spec_name}:{pool}"
            plan = ExperimentPlan(label, APPROACH_TOPDOWN, spec, training_pool=pool,
                                  ensemble_size=ensemble_size)
            results[label] = run_topdown(plan, sites, split, settings, rng)
    return results


def run_experiment3_variants(
    sites: list[SiteRecord],
    split: DataSplit,
    settings: RunSettings,
    rng: Rng,
    full_attribute_names: tuple[str, ...],
    expert_attributes: tuple[str, ...],
    category_map: dict[str, str],
    ensemble_size: int = 5,
) -> dict[str, ApproachResult]:
    """Attribute-set comparison: full, expert subset, z-score categories."""
    missing = [a for a in expert_attributes if a not in full_attribute_names]
    if missing:
        raise ValueError(f"expert attributes not in the supplied set: {missing}")
    category_names = tuple(sorted(set(category_map.values())))

    specs = {
        "attrs_full": canonical_feature_spec(tuple(full_attribute_names)),
        "attrs_expert": canonical_feature_spec(tuple(expert_attributes)),
        "attrs_zscore": replace(
            canonical_feature_spec(category_names),
            attribute_mode="zscore_categories",
        ),
    }
    results = {}
    for label, spec in specs.items():
        plan = ExperimentPlan(label, APPROACH_TOPDOWN, spec, ensemble_size=ensemble_size)
        results[label] = run_topdown(
            plan, sites, split, settings, rng,
            category_map=category_map if label == "attrs_zscore" else None,
        )
    return results
