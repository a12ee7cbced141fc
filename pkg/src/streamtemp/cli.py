"""Configuration-driven command line entry point.

``streamtemp --config config.json`` ingests the CSV corpus named in the
config, runs the requested experiment plans, and writes one report
directory per plan.  Reruns with the same config and seed produce
byte-identical reports: site iteration is sorted, JSON keys are sorted,
floats are rounded to six significant digits, and nothing time- or
host-dependent is written.

Ingestion never drops data silently.  A malformed row is rejected and
recorded with its file and line number; a site that fails validation is
recorded with the reason; a duplicate (site, date) key is a hard error
because there is no defensible way to pick one row.  Relative paths in
the config resolve against the config file's directory; ``--out``
resolves against the working directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from datetime import date as _date
from pathlib import Path

import numpy as np

from . import __version__
from .data_model import (
    METEO_COLUMNS,
    FeatureSpec,
    SiteRecord,
    SiteRejectedError,
    filter_observations,
    split_train_test,
    transform_dam_distances,
)
from .evaluate import (
    aggregate,
    climatology_predictions,
    compare_to_baseline,
    member_rmse_std,
    permutation_importance,
    site_metrics,
    temporal_breakdown,
)
from .experiments import (
    RunSettings,
    run_experiment1,
    run_experiment2_matrix,
    run_experiment3_variants,
)
from .lstm import LstmConfig
from .numerics import Rng
from .parallel import make_mapper
from .thermal_regime import (
    RegimeRegion,
    RegimeThresholds,
    amplitude_ratio_phase_lag,
    classify_site,
    fit_sine,
    regime_error_report,
)
from .trainer import TrainConfig

__all__ = [
    "PLAN_NAMES",
    "ConfigError",
    "IngestError",
    "ParseIssue",
    "IngestResult",
    "ingest",
    "load_config",
    "run",
    "main",
]

PLAN_NAMES = ("exp1", "exp2", "exp3")
CLIMATOLOGY_LABEL = "climatology"

_OBS_COLUMNS = ("site_id", "date", "water_temp_c")
_DRIVER_REQUIRED = ("site_id", "date", *METEO_COLUMNS, "prcp_mm")
_DRIVER_OPTIONAL = "discharge_cfs"
_SITE_REQUIRED = ("site_id", "lat", "lon", "elev_m", "huc2")
_SITE_OPTIONAL = ("cluster_id", "dam_distance_km")

_TOP_KEYS = {
    "data",
    "seed",
    "threads",
    "output_dir",
    "plans",
    "split_threshold_dates",
    "dam_distance_attributes",
    "importance_repeats",
    "training",
    "regime_thresholds",
}
_DATA_KEYS = {"observations", "drivers", "sites", "attributes", "categories", "expert_attributes"}
_DATA_REQUIRED = ("observations", "drivers", "sites")
_TRAINING_KEYS = {
    "hidden_size",
    "num_layers",
    "dropout_rate",
    "sequence_length",
    "window_shift",
    "batch_size",
    "max_epochs",
    "patience",
    "learning_rate",
    "weight_decay",
    "ensemble_size",
    "preset_fields",
    "mtl_top_k",
}
_REGION_KEYS = {"ratio_min", "ratio_max", "lag_min", "lag_max"}


class ConfigError(ValueError):
    """The config file is missing, malformed, or inconsistent."""


class IngestError(ValueError):
    """A hard ingestion failure that no manifest entry can repair."""


# ---------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class ParseIssue:
    """One rejected row or cell, pinned to its source line."""

    file: str
    line: int
    reason: str


@dataclass
class IngestResult:
    """Validated site records plus everything that was excluded and why."""

    sites: list[SiteRecord]
    issues: list[ParseIssue]
    rejected_sites: dict[str, str]
    file_hashes: dict[str, str]
    attribute_names: tuple[str, ...] = ()
    category_map: dict[str, str] = field(default_factory=dict)
    expert_attributes: tuple[str, ...] = ()


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require_columns(path: Path, fieldnames, required) -> None:
    have = set(fieldnames or ())
    missing = [c for c in required if c not in have]
    if missing:
        raise IngestError(f"{path.name}: missing required columns {missing}")


def _parse_iso_date(text: str) -> np.datetime64:
    # fromisoformat enforces YYYY-MM-DD and real calendar days
    return np.datetime64(_date.fromisoformat(text.strip()), "D")


def _read_observations(path: Path, issues: list[ParseIssue]):
    """site -> {date: temperature}, remembering source lines for duplicates."""
    values: dict[str, dict[np.datetime64, float]] = {}
    lines: dict[tuple[str, np.datetime64], int] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        _require_columns(path, reader.fieldnames, _OBS_COLUMNS)
        for row in reader:
            line = reader.line_num
            site_id = (row.get("site_id") or "").strip()
            if not site_id:
                issues.append(ParseIssue(path.name, line, "empty site_id"))
                continue
            try:
                day = _parse_iso_date(row.get("date") or "")
            except ValueError:
                issues.append(ParseIssue(path.name, line, f"bad date {row.get('date')!r}"))
                continue
            try:
                temp = float(row.get("water_temp_c") or "")
            except ValueError:
                issues.append(ParseIssue(path.name, line, f"bad water_temp_c {row.get('water_temp_c')!r}"))
                continue
            key = (site_id, day)
            if key in lines:
                raise IngestError(
                    f"{path.name}:{line}: duplicate observation for ({site_id}, {day}),"
                    f" first seen at line {lines[key]}"
                )
            lines[key] = line
            values.setdefault(site_id, {})[day] = temp
    return values


def _read_drivers(path: Path, issues: list[ParseIssue]):
    """site -> {date: (meteo row, precip, discharge or nan)}, plus flow flag."""
    rows: dict[str, dict[np.datetime64, tuple]] = {}
    lines: dict[tuple[str, np.datetime64], int] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        _require_columns(path, reader.fieldnames, _DRIVER_REQUIRED)
        has_flow_column = _DRIVER_OPTIONAL in (reader.fieldnames or ())
        for row in reader:
            line = reader.line_num
            site_id = (row.get("site_id") or "").strip()
            if not site_id:
                issues.append(ParseIssue(path.name, line, "empty site_id"))
                continue
            try:
                day = _parse_iso_date(row.get("date") or "")
            except ValueError:
                issues.append(ParseIssue(path.name, line, f"bad date {row.get('date')!r}"))
                continue
            try:
                meteo = tuple(float(row[c]) for c in METEO_COLUMNS)
                precip = float(row["prcp_mm"])
            except (ValueError, TypeError):
                issues.append(ParseIssue(path.name, line, "unparseable driver value"))
                continue
            flow = math.nan
            if has_flow_column:
                cell = (row.get(_DRIVER_OPTIONAL) or "").strip()
                if cell:
                    try:
                        flow = float(cell)
                    except ValueError:
                        issues.append(ParseIssue(path.name, line, f"bad {_DRIVER_OPTIONAL} {cell!r}"))
                        continue
            key = (site_id, day)
            if key in lines:
                raise IngestError(
                    f"{path.name}:{line}: duplicate driver row for ({site_id}, {day}),"
                    f" first seen at line {lines[key]}"
                )
            lines[key] = line
            rows.setdefault(site_id, {})[day] = (meteo, precip, flow)
    return rows


def _read_sites(path: Path, issues: list[ParseIssue]):
    meta: dict[str, dict] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        _require_columns(path, reader.fieldnames, _SITE_REQUIRED)
        for row in reader:
            line = reader.line_num
            site_id = (row.get("site_id") or "").strip()
            if not site_id:
                issues.append(ParseIssue(path.name, line, "empty site_id"))
                continue
            if site_id in meta:
                raise IngestError(f"{path.name}:{line}: duplicate site row for {site_id}")
            try:
                entry = {
                    "latitude": float(row["lat"]),
                    "longitude": float(row["lon"]),
                    "elevation": float(row["elev_m"]),
                    "region_code": (row.get("huc2") or "").strip(),
                }
            except (ValueError, TypeError):
                issues.append(ParseIssue(path.name, line, "unparseable site metadata"))
                continue
            if not entry["region_code"]:
                issues.append(ParseIssue(path.name, line, "empty huc2"))
                continue
            try:
                cluster = (row.get("cluster_id") or "").strip()
                entry["cluster_id"] = int(cluster) if cluster else None
                dam = (row.get("dam_distance_km") or "").strip()
                entry["dam_distance_km"] = float(dam) if dam else None
            except ValueError:
                issues.append(ParseIssue(path.name, line, "unparseable cluster_id or dam_distance_km"))
                continue
            meta[site_id] = entry
    return meta


def _read_attributes(path: Path, issues: list[ParseIssue]):
    tables: dict[str, dict[str, float]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        _require_columns(path, reader.fieldnames, ("site_id",))
        names = [c for c in (reader.fieldnames or ()) if c != "site_id"]
        for row in reader:
            line = reader.line_num
            site_id = (row.get("site_id") or "").strip()
            if not site_id:
                issues.append(ParseIssue(path.name, line, "empty site_id"))
                continue
            if site_id in tables:
                raise IngestError(f"{path.name}:{line}: duplicate attribute row for {site_id}")
            values = {}
            try:
                for name in names:
                    cell = (row.get(name) or "").strip()
                    if cell:
                        values[name] = float(cell)
            except ValueError:
                issues.append(ParseIssue(path.name, line, f"unparseable attribute row for {site_id}"))
                continue
            tables[site_id] = values
    return tables


def _read_categories(path: Path):
    mapping: dict[str, str] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        _require_columns(path, reader.fieldnames, ("attribute", "category"))
        for row in reader:
            attr = (row.get("attribute") or "").strip()
            cat = (row.get("category") or "").strip()
            if not attr or not cat:
                raise IngestError(f"{path.name}:{reader.line_num}: empty attribute or category")
            if attr in mapping:
                raise IngestError(f"{path.name}:{reader.line_num}: duplicate category for {attr}")
            mapping[attr] = cat
    return mapping


def _read_expert_attributes(path: Path) -> tuple[str, ...]:
    names = []
    for raw in path.read_text().splitlines():
        text = raw.strip()
        if text and not text.startswith("#"):
            names.append(text)
    return tuple(names)


def ingest(data_paths: dict[str, Path], dam_distance_attributes=()) -> IngestResult:
    """Read and validate the CSV corpus.

    Only sites passing every structural check and the observation
    quality gate come back in ``sites``; everything else lands in
    ``issues`` (row level) or ``rejected_sites`` (site level).
    """
    issues: list[ParseIssue] = []
    hashes = {name: _sha256(path) for name, path in sorted(data_paths.items())}

    observations = _read_observations(data_paths["observations"], issues)
    drivers = _read_drivers(data_paths["drivers"], issues)
    metadata = _read_sites(data_paths["sites"], issues)
    attributes = (
        _read_attributes(data_paths["attributes"], issues) if "attributes" in data_paths else {}
    )
    category_map = _read_categories(data_paths["categories"]) if "categories" in data_paths else {}
    expert = (
        _read_expert_attributes(data_paths["expert_attributes"])
        if "expert_attributes" in data_paths
        else ()
    )

    sites: list[SiteRecord] = []
    rejected: dict[str, str] = {}
    all_ids = sorted(set(observations) | set(drivers) | set(metadata) | set(attributes))
    for site_id in all_ids:
        if site_id not in metadata:
            rejected[site_id] = "no usable site metadata row"
            continue
        if site_id not in drivers:
            rejected[site_id] = "no driver record"
            continue
        per_day = drivers[site_id]
        days = sorted(per_day)
        span = int((days[-1] - days[0]).astype(int)) + 1
        if span != len(days):
            rejected[site_id] = (
                f"driver dates not contiguous daily ({len(days)} rows spanning {span} days)"
            )
            continue

        dates = np.array(days, dtype="datetime64[D]")
        meteo = np.array([per_day[d][0] for d in days], dtype=np.float64)
        precip = np.array([per_day[d][1] for d in days], dtype=np.float64)
        flow = np.array([per_day[d][2] for d in days], dtype=np.float64)
        discharge = None if np.all(np.isnan(flow)) else flow

        water = np.full(len(days), np.nan)
        index = {d: i for i, d in enumerate(days)}
        for day, temp in sorted(observations.get(site_id, {}).items()):
            if day not in index:
                issues.append(
                    ParseIssue(
                        data_paths["observations"].name,
                        0,
                        f"{site_id} {day}: observation outside the driver record",
                    )
                )
                continue
            water[index[day]] = temp

        attr_values = dict(attributes.get(site_id, {}))
        dam_names = [n for n in dam_distance_attributes if n in attr_values]
        if dam_names:
            try:
                attr_values = transform_dam_distances(attr_values, dam_names)
            except ValueError as exc:
                rejected[site_id] = f"dam distance recoding failed: {exc}"
                continue

        entry = metadata[site_id]
        try:
            record = SiteRecord(
                site_id=site_id,
                latitude=entry["latitude"],
                longitude=entry["longitude"],
                elevation=entry["elevation"],
                region_code=entry["region_code"],
                dates=dates,
                water_temp=water,
                meteo=meteo,
                precip=precip,
                discharge=discharge,
                attributes=attr_values,
                cluster_id=entry["cluster_id"],
                dam_distance_km=entry["dam_distance_km"],
            )
            sites.append(filter_observations(record))
        except SiteRejectedError as exc:
            rejected[site_id] = str(exc)
        except ValueError as exc:
            rejected[site_id] = f"invalid record: {exc}"

    attribute_names = tuple(sorted({n for s in sites for n in s.attributes}))
    return IngestResult(
        sites=sites,
        issues=issues,
        rejected_sites=rejected,
        file_hashes=hashes,
        attribute_names=attribute_names,
        category_map=category_map,
        expert_attributes=expert,
    )


# ---------------------------------------------------------------------------
# configuration


def _check_keys(block: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def load_config(path: Path) -> dict:
    """Parse and validate the JSON config; resolve data paths."""
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw_bytes = path.read_bytes()
    try:
        raw = json.loads(raw_bytes)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path.name}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path.name}: top level must be an object")
    _check_keys(raw, _TOP_KEYS, path.name)

    data = raw.get("data")
    if not isinstance(data, dict):
        raise ConfigError("config must carry a 'data' object")
    _check_keys(data, _DATA_KEYS, "data")
    missing = [k for k in _DATA_REQUIRED if k not in data]
    if missing:
        raise ConfigError(f"data: missing required entries {missing}")
    base = path.parent
    paths = {}
    for name, rel in sorted(data.items()):
        resolved = base / str(rel)
        if not resolved.is_file():
            raise ConfigError(f"data.{name}: file not found: {resolved}")
        paths[name] = resolved

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    threads = raw.get("threads", 1)
    if not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads must be a positive integer")

    plans = raw.get("plans", ["exp1"])
    if not isinstance(plans, list) or not plans:
        raise ConfigError("plans must be a non-empty list")
    unknown = [p for p in plans if p not in PLAN_NAMES]
    if unknown:
        raise ConfigError(f"unknown plans {unknown}; available: {list(PLAN_NAMES)}")

    threshold = raw.get("split_threshold_dates")
    if threshold is not None and (not isinstance(threshold, int) or threshold < 365):
        raise ConfigError("split_threshold_dates must be an integer >= 365")

    repeats = raw.get("importance_repeats", 3)
    if not isinstance(repeats, int) or repeats < 1:
        raise ConfigError("importance_repeats must be a positive integer")

    dam_names = raw.get("dam_distance_attributes", [])
    if not isinstance(dam_names, list) or not all(isinstance(n, str) for n in dam_names):
        raise ConfigError("dam_distance_attributes must be a list of attribute names")

    training = raw.get("training", {})
    if not isinstance(training, dict):
        raise ConfigError("training must be an object")
    _check_keys(training, _TRAINING_KEYS, "training")

    thresholds = None
    block = raw.get("regime_thresholds")
    if block is not None:
        if not isinstance(block, dict):
            raise ConfigError("regime_thresholds must be an object")
        regions = {}
        for label, region in sorted(block.items()):
            if not isinstance(region, dict):
                raise ConfigError(f"regime_thresholds.{label} must be an object")
            _check_keys(region, _REGION_KEYS, f"regime_thresholds.{label}")
            missing = sorted(_REGION_KEYS - set(region))
            if missing:
                raise ConfigError(f"regime_thresholds.{label}: missing {missing}")
            try:
                regions[label] = RegimeRegion(
                    float(region["ratio_min"]),
                    float(region["ratio_max"]),
                    float(region["lag_min"]),
                    float(region["lag_max"]),
                )
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"regime_thresholds.{label}: {exc}") from exc
        try:
            thresholds = RegimeThresholds(regions)
        except ValueError as exc:
            raise ConfigError(f"regime_thresholds: {exc}") from exc

    return {
        "data_paths": paths,
        "data_names": {name: str(rel) for name, rel in sorted(data.items())},
        "seed": seed,
        "threads": threads,
        "output_dir": str(raw.get("output_dir", "reports")),
        "plans": list(plans),
        "split_threshold_dates": threshold,
        "dam_distance_attributes": list(dam_names),
        "importance_repeats": repeats,
        "training": dict(training),
        "regime_thresholds": thresholds,
        "config_sha256": hashlib.sha256(raw_bytes).hexdigest(),
        "config_dir": base,
    }


def _build_settings(config: dict) -> tuple[RunSettings, int, int]:
    """RunSettings plus (ensemble_size, mtl_top_k) from the training block."""
    t = config["training"]
    try:
        lstm = LstmConfig(
            hidden_size=t.get("hidden_size", 16),
            num_layers=t.get("num_layers", 1),
            dropout_rate=t.get("dropout_rate", 0.0),
            sequence_length=t.get("sequence_length", 200),
            window_shift=t.get("window_shift", 100),
        )
        train = TrainConfig(
            learning_rate=t.get("learning_rate", 1e-3),
            batch_size=t.get("batch_size", 64),
            weight_decay=t.get("weight_decay", 0.0),
            patience=t.get("patience", 300),
            max_epochs=t.get("max_epochs", 1000),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training: {exc}") from exc
    ensemble_size = t.get("ensemble_size", 5)
    if not isinstance(ensemble_size, int) or ensemble_size < 1:
        raise ConfigError("training.ensemble_size must be a positive integer")
    top_k = t.get("mtl_top_k", 10)
    if not isinstance(top_k, int) or top_k < 1:
        raise ConfigError("training.mtl_top_k must be a positive integer")
    kwargs = {}
    if "preset_fields" in t:
        fields = t["preset_fields"]
        if not isinstance(fields, list) or not all(isinstance(f, str) for f in fields):
            raise ConfigError("training.preset_fields must be a list of field names")
        kwargs["preset_fields"] = tuple(fields)
    settings = RunSettings(
        lstm_config=lstm,
        train_config=train,
        mtl_top_k=top_k,
        parallel_map=make_mapper(config["threads"]),
        **kwargs,
    )
    return settings, ensemble_size, top_k


# ---------------------------------------------------------------------------
# report emission


def _fmt6(value) -> str:
    if value is None:
        return ""
    v = float(value)
    if math.isnan(v):
        return ""
    return f"{v:.6g}"


def _jsonable(obj):
    """Recursively round floats to 6 significant digits; NaN becomes null."""
    if isinstance(obj, float):
        if math.isnan(obj):
            return None
        return float(f"{obj:.6g}")
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_json(path: Path, obj) -> None:
    with path.open("w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def importance_groups(feature_names) -> dict[str, tuple[str, ...]]:
    """Shuffling groups: correlated columns move together.

    The three air temperatures form one group, as do the raw/log pairs
    for precipitation and discharge, and the full static attribute
    block.  Everything else is its own group.
    """
    names = tuple(feature_names)
    present = set(names)
    groups: dict[str, tuple[str, ...]] = {}

    def bundle(label, members):
        members = tuple(m for m in members if m in present)
        if members:
            groups[label] = members

    bundle("air_temperature", ("tmax_c", "tmean_c", "tmin_c"))
    bundle("precipitation", ("prcp_mm", "log_prcp_mm"))
    bundle("discharge", ("discharge_cfs", "log_discharge_cfs"))
    bundle("static_attributes", tuple(n for n in names if n.startswith("attr:")))
    grouped = {m for ms in groups.values() for m in ms}
    for name in names:
        if name not in grouped:
            groups[name] = (name,)
    return groups


@dataclass
class _RunReport:
    """Everything the report files need for one labeled run."""

    label: str
    approach: str
    metrics: dict[str, object]
    predictions: dict[str, np.ndarray]
    unpredicted: tuple[str, ...]
    training_site_count: int | None
    group_training_counts: dict[str, int] | None
    chosen_sources: dict[str, tuple[str, ...]] | None


def _score_run(label, approach, predictions, unpredicted, by_id, **extra) -> _RunReport:
    metrics = {
        sid: site_metrics(sid, by_id[sid].dates, predictions[sid], by_id[sid].water_temp)
        for sid in sorted(predictions)
    }
    return _RunReport(
        label=label,
        approach=approach,
        metrics=metrics,
        predictions=predictions,
        unpredicted=tuple(sorted(unpredicted)),
        training_site_count=extra.get("training_site_count"),
        group_training_counts=extra.get("group_training_counts"),
        chosen_sources=extra.get("chosen_sources"),
    )


def _climatology_run(by_id, test_ids) -> _RunReport:
    predictions = {}
    for sid in sorted(test_ids):
        site = by_id[sid]
        mask = site.observed_mask
        predictions[sid] = climatology_predictions(
            site.dates[mask], site.water_temp[mask], site.dates
        )
    return _score_run(CLIMATOLOGY_LABEL, CLIMATOLOGY_LABEL, predictions, (), by_id)


def _abs_errors(report: _RunReport, by_id) -> dict[str, np.ndarray]:
    out = {}
    for sid, pred in report.predictions.items():
        site = by_id[sid]
        mask = site.observed_mask
        out[sid] = np.abs(pred[mask] - site.water_temp[mask])
    return out


def _classify_tests(by_id, test_ids, thresholds):
    """Regime class per test site; failures recorded, never raised."""
    tmean_col = METEO_COLUMNS.index("tmean_c")
    classes, skipped = {}, {}
    for sid in sorted(test_ids):
        site = by_id[sid]
        try:
            air = fit_sine(site.dates, site.meteo[:, tmean_col])
            water = fit_sine(site.dates, site.water_temp)
            ratio, lag = amplitude_ratio_phase_lag(air, water)
            classes[sid] = classify_site(ratio, lag, site.dam_distance_km, thresholds)
        except ValueError as exc:
            skipped[sid] = str(exc)
    return classes, skipped


def _summary_entry(report: _RunReport, baseline: _RunReport | None, by_id, classes) -> dict:
    metrics = list(report.metrics.values())
    entry = {
        "approach": report.approach,
        "n_predicted": len(metrics),
        "unpredicted": list(report.unpredicted),
        "training_site_count": report.training_site_count,
        "group_training_counts": report.group_training_counts,
        "aggregate": None,
        "comparison": None,
        "regime": None,
    }
    if report.chosen_sources is not None:
        entry["chosen_sources"] = {sid: list(v) for sid, v in sorted(report.chosen_sources.items())}
    if metrics:
        summary = aggregate(metrics)
        entry["aggregate"] = {
            "n_sites": summary.n_sites,
            "median_rmse_c": summary.median_rmse,
            "median_bias_c": summary.median_bias,
            "median_warm10_rmse_c": summary.median_warm10,
            "mean_rmse_c": summary.mean_rmse,
            "mean_bias_c": summary.mean_bias,
            "mean_warm10_rmse_c": summary.mean_warm10,
            "std_rmse_c": summary.std_rmse,
            "std_bias_c": summary.std_bias,
            "std_warm10_rmse_c": summary.std_warm10,
            "n_sites_under_2c": summary.n_sites_under_2c,
        }
    if baseline is not None and baseline.label != report.label:
        common = sorted(set(report.predictions) & set(baseline.predictions))
        if common:
            own = _abs_errors(report, by_id)
            base = _abs_errors(baseline, by_id)
            result = compare_to_baseline(
                {sid: own[sid] for sid in common}, {sid: base[sid] for sid in common}
            )
            entry["comparison"] = {
                "baseline": baseline.label,
                "counts": dict(result.counts),
                "mean_delta_rmse_c": dict(result.mean_delta_rmse),
            }
    if classes:
        shared_c = {sid: c for sid, c in classes.items() if sid in report.metrics}
        shared_m = {sid: report.metrics[sid] for sid in shared_c}
        if shared_c:
            entry["regime"] = [
                {
                    "regime": r.label,
                    "n_sites": r.n_sites,
                    "fraction": r.fraction,
                    "median_rmse_c": r.median_rmse,
                    "mean_bias_c": r.mean_bias,
                }
                for r in regime_error_report(shared_c, shared_m)
            ]
    return entry


def _write_plan_report(
    plan_dir: Path,
    plan_name: str,
    results: dict,
    baseline_label: str,
    importance_labels: tuple[str, ...],
    sites: list[SiteRecord],
    split,
    config: dict,
    ensemble_size: int,
    root_rng: Rng,
) -> None:
    plan_dir.mkdir(parents=True, exist_ok=True)
    by_id = {s.site_id: s for s in sites}

    reports: dict[str, _RunReport] = {}
    for label in sorted(results):
        r = results[label]
        reports[label] = _score_run(
            label,
            r.approach,
            r.predictions,
            r.unpredicted,
            by_id,
            training_site_count=r.training_site_count,
            group_training_counts=r.group_training_counts,
            chosen_sources=r.chosen_sources,
        )
    reports[CLIMATOLOGY_LABEL] = _climatology_run(by_id, split.test_site_ids)
    baseline = reports.get(baseline_label)

    classes, regime_skipped = {}, {}
    thresholds = config["regime_thresholds"]
    if thresholds is not None:
        classes, regime_skipped = _classify_tests(by_id, split.test_site_ids, thresholds)

    # site_metrics.csv
    rows = []
    for label in sorted(reports):
        for sid, m in sorted(reports[label].metrics.items()):
            rows.append(
                [label, sid, m.n_obs, _fmt6(m.rmse), _fmt6(m.mean_bias), _fmt6(m.rmse_warm10)]
            )
    _write_csv(
        plan_dir / "site_metrics.csv",
        ["run", "site_id", "n_obs", "rmse_c", "mean_bias_c", "rmse_warm10_c"],
        rows,
    )

    # predictions.csv: observed dates only, so files stay proportional to data
    rows = []
    for label in sorted(reports):
        for sid in sorted(reports[label].predictions):
            site = by_id[sid]
            pred = reports[label].predictions[sid]
            for i in np.flatnonzero(site.observed_mask):
                rows.append(
                    [label, sid, str(site.dates[i]), _fmt6(pred[i]), _fmt6(site.water_temp[i])]
                )
    _write_csv(
        plan_dir / "predictions.csv",
        ["run", "site_id", "date", "predicted_c", "observed_c"],
        rows,
    )

    # comparison.csv
    rows = []
    if baseline is not None:
        base_errors = _abs_errors(baseline, by_id)
        for label in sorted(reports):
            if label == baseline.label:
                continue
            own = _abs_errors(reports[label], by_id)
            common = sorted(set(own) & set(base_errors))
            if not common:
                continue
            result = compare_to_baseline(
                {sid: own[sid] for sid in common}, {sid: base_errors[sid] for sid in common}
            )
            for sc in result.sites:
                rows.append(
                    [label, sc.site_id, _fmt6(sc.delta_rmse), _fmt6(sc.p_value), sc.category]
                )
    _write_csv(
        plan_dir / "comparison.csv",
        ["run", "site_id", "delta_rmse_c", "p_value", "category"],
        rows,
    )

    # importance.csv
    rows = []
    for label in importance_labels:
        if label not in results:
            continue
        result = results[label]
        if not result.predictions:
            continue
        inputs = result.test_inputs(sites)
        observed = {sid: by_id[sid].water_temp for sid in inputs}
        scores = permutation_importance(
            result.predict_map,
            inputs,
            observed,
            result.feature_names,
            importance_groups(result.feature_names),
            root_rng.child_named(f"plan:{plan_name}:importance:{label}"),
            repeats=config["importance_repeats"],
        )
        floor = None
        if ensemble_size >= 2:
            floor = member_rmse_std(result.member_prediction_maps(inputs), observed)
        for group in sorted(scores, key=lambda g: (-scores[g], g)):
            rows.append([label, group, _fmt6(scores[group]), _fmt6(floor)])
    _write_csv(
        plan_dir / "importance.csv",
        ["run", "feature_group", "rmse_increase_c", "noise_floor_c"],
        rows,
    )

    # doy_rmse.csv
    rows = []
    for label in sorted(reports):
        report = reports[label]
        if not report.predictions:
            continue
        breakdown = temporal_breakdown(
            {sid: by_id[sid].dates for sid in report.predictions},
            report.predictions,
            {sid: by_id[sid].water_temp for sid in report.predictions},
        )
        for day, value in sorted(breakdown.day_of_year_rmse.items()):
            rows.append([label, day, _fmt6(value)])
    _write_csv(plan_dir / "doy_rmse.csv", ["run", "day_of_year", "rmse_c"], rows)

    # regime.csv
    rows = []
    for sid in sorted(classes):
        c = classes[sid]
        rows.append(
            [
                sid,
                c.label,
                _fmt6(c.amplitude_ratio),
                _fmt6(c.phase_lag_days),
                _fmt6(by_id[sid].dam_distance_km),
            ]
            )
    _write_csv(
        plan_dir / "regime.csv",
        ["site_id", "regime", "amplitude_ratio", "phase_lag_days", "dam_distance_km"],
        rows,
    )

    # summary.json
    summary = {
        "plan": plan_name,
        "seed": config["seed"],
        "test_sites": sorted(split.test_site_ids),
        "runs": {
            label: _summary_entry(reports[label], baseline, by_id, classes)
            for label in sorted(reports)
        },
    }
    _write_json(plan_dir / "summary.json", _jsonable(summary))

    # manifest.json: provenance and exclusions, full precision
    manifest = {
        "plan": plan_name,
        "seed": config["seed"],
        "package_version": __version__,
        "config_sha256": config["config_sha256"],
        "inputs": {
            name: {"path": config["data_names"][name], "sha256": config["ingest"].file_hashes[name]}
            for name in sorted(config["data_names"])
        },
        "ingest": {
            "n_sites": len(sites),
            "n_training_sites": len(split.training_site_ids),
            "n_test_sites": len(split.test_site_ids),
            "parse_issues": [
                {"file": i.file, "line": i.line, "reason": i.reason}
                for i in config["ingest"].issues
            ],
            "rejected_sites": dict(sorted(config["ingest"].rejected_sites.items())),
        },
        "exclusions": {
            "unpredicted": {
                label: list(reports[label].unpredicted)
                for label in sorted(reports)
                if reports[label].unpredicted
            },
            "regime_unclassified": dict(sorted(regime_skipped.items())),
        },
    }
    _write_json(plan_dir / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# plan execution


def _execute_plan(plan_name, sites, split, settings, ensemble_size, ingest_result, root_rng):
    """Dispatch one plan; returns (results, baseline_label, importance_labels)."""
    rng = root_rng.child_named(f"plan:{plan_name}")
    if plan_name == "exp1":
        results = run_experiment1(
            sites,
            split,
            settings,
            rng,
            feature_spec=FeatureSpec(use_discharge=True),
            ensemble_size=ensemble_size,
        )
        return results, "topdown", ("topdown", "grouped_regional", "grouped_cluster")
    if plan_name == "exp2":
        results = run_experiment2_matrix(
            sites, split, settings, rng, ingest_result.attribute_names, ensemble_size=ensemble_size
        )
        return results, "baseline", ()
    if plan_name == "exp3":
        if not ingest_result.category_map:
            raise ConfigError("exp3 requires data.categories")
        if not ingest_result.expert_attributes:
            raise ConfigError("exp3 requires data.expert_attributes")
        results = run_experiment3_variants(
            sites,
            split,
            settings,
            rng,
            full_attribute_names=ingest_result.attribute_names,
            expert_attributes=ingest_result.expert_attributes,
            category_map=ingest_result.category_map,
            ensemble_size=ensemble_size,
        )
        return results, "attrs_full", ("attrs_full", "attrs_expert", "attrs_zscore")
    raise ConfigError(f"unknown plan {plan_name!r}")


def run(
    config_path: Path,
    plans: list[str] | None = None,
    seed: int | None = None,
    threads: int | None = None,
    out: Path | None = None,
    validate_only: bool = False,
) -> int:
    """Full pipeline: config, ingestion, plans, reports.  Returns exit code."""
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if seed is not None:
        config["seed"] = seed
    if threads is not None:
        config["threads"] = threads
    if plans:
        unknown = [p for p in plans if p not in PLAN_NAMES]
        if unknown:
            print(f"error: unknown plans {unknown}", file=sys.stderr)
            return 1
        config["plans"] = list(dict.fromkeys(plans))
    out_dir = Path(out) if out is not None else config["config_dir"] / config["output_dir"]

    try:
        ingest_result = ingest(config["data_paths"], config["dam_distance_attributes"])
    except IngestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    config["ingest"] = ingest_result

    print(
        f"ingest: {len(ingest_result.sites)} sites,"
        f" {len(ingest_result.issues)} parse issues,"
        f" {len(ingest_result.rejected_sites)} rejected sites"
    )

    if validate_only:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(
            out_dir / "validation.json",
            {
                "config_sha256": config["config_sha256"],
                "inputs": {
                    name: {"path": config["data_names"][name], "sha256": h}
                    for name, h in sorted(ingest_result.file_hashes.items())
                },
                "n_sites": len(ingest_result.sites),
                "site_ids": sorted(s.site_id for s in ingest_result.sites),
                "attribute_names": list(ingest_result.attribute_names),
                "parse_issues": [
                    {"file": i.file, "line": i.line, "reason": i.reason}
                    for i in ingest_result.issues
                ],
                "rejected_sites": dict(sorted(ingest_result.rejected_sites.items())),
            },
        )
        print(f"validation report: {out_dir / 'validation.json'}")
        return 0

    try:
        settings, ensemble_size, _ = _build_settings(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if not ingest_result.sites:
        print("no usable sites; nothing to run")
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(
            out_dir / "run.json",
            {
                "config_sha256": config["config_sha256"],
                "seed": config["seed"],
                "package_version": __version__,
                "plans": {name: "skipped: no usable sites" for name in config["plans"]},
            },
        )
        return 0

    threshold = config["split_threshold_dates"]
    if threshold is None:
        split = split_train_test(ingest_result.sites)
    else:
        split = split_train_test(ingest_result.sites, threshold)
    print(
        f"split: {len(split.training_site_ids)} training sites,"
        f" {len(split.test_site_ids)} test sites"
    )

    root_rng = Rng(config["seed"])
    statuses: dict[str, str] = {}
    for plan_name in config["plans"]:
        print(f"plan {plan_name}: running")
        try:
            results, baseline_label, importance_labels = _execute_plan(
                plan_name,
                ingest_result.sites,
                split,
                settings,
                ensemble_size,
                ingest_result,
                root_rng,
            )
            _write_plan_report(
                out_dir / plan_name,
                plan_name,
                results,
                baseline_label,
                importance_labels,
                ingest_result.sites,
                split,
                config,
                ensemble_size,
                root_rng,
            )
        except Exception as exc:  # noqa: BLE001 - plan isolation is the contract
            statuses[plan_name] = f"failed: {exc}"
            print(f"plan {plan_name}: failed: {exc}", file=sys.stderr)
            continue
        statuses[plan_name] = "ok"
        print(f"plan {plan_name}: ok ({out_dir / plan_name})")

    _write_json(
        out_dir / "run.json",
        {
            "config_sha256": config["config_sha256"],
            "seed": config["seed"],
            "package_version": __version__,
            "plans": statuses,
        },
    )
    return 0 if all(s == "ok" for s in statuses.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamtemp",
        description="Train stream temperature models and write experiment reports.",
    )
    parser.add_argument("--config", required=True, help="path to the JSON run configuration")
    parser.add_argument(
        "--plan",
        action="append",
        choices=PLAN_NAMES,
        help="run only this plan (repeatable); default is the config's plan list",
    )
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, help="worker threads for site-level training")
    parser.add_argument("--out", help="report directory (default: config output_dir)")
    parser.add_argument(
        "--validate-only",
        action="store_true",
        help="ingest and validate the corpus, write validation.json, run nothing",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 1
    if args.threads is not None and args.threads < 1:
        print("error: threads must be a positive integer", file=sys.stderr)
        return 1
    return run(
        Path(args.config),
        plans=args.plan,
        seed=args.seed,
        threads=args.threads,
        out=Path(args.out) if args.out else None,
        validate_only=args.validate_only,
    )


if __name__ == "__main__":
    raise SystemExit(main())
