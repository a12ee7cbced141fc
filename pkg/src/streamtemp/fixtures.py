"""Synthetic watershed fixture.

A small, fully deterministic dataset with the causal structure the
models are meant to exploit: mean air temperature carries a seasonal
cycle plus autocorrelated weather anomalies, and each site's water
temperature is an affine response to an exponential moving average of
air temperature.  The smoothing time constant and response gain encode
the site's thermal character, so atmospheric, shallow-groundwater,
deep-groundwater, and dammed sites are all represented and separable by
the regime analysis.  Because water tracks the weather anomalies and
not just the calendar, a day-of-year climatology is a beatable but
honest baseline.

Training sites carry four densely observed years.  Test sites span five
years observed sparsely enough to stay under the split threshold; their
first four years overlap the training period, so a day-of-year
climatology can be fit on the training years and judged on the last.  By
default a couple of sites lack streamflow or static attributes to
exercise availability handling, and one region is deliberately tiny;
``complete=True`` removes the gaps for runs that need full coverage.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import METEO_COLUMNS, SiteRecord
from .numerics import Rng
from .thermal_regime import RegimeRegion, RegimeThresholds

__all__ = [
    "FIXTURE_SPLIT_THRESHOLD",
    "FIXTURE_EXPERT_ATTRIBUTES",
    "FIXTURE_CATEGORY_MAP",
    "Fixture",
    "fixture_regime_thresholds",
    "make_fixture",
    "write_fixture_csvs",
]

FIXTURE_SPLIT_THRESHOLD = 1200

FIXTURE_EXPERT_ATTRIBUTES = ("drain_sqkm", "gw_index")

FIXTURE_CATEGORY_MAP = {
    "drain_sqkm": "basin_size",
    "elev_relief_m": "topography",
    "gw_index": "hydrogeology",
    "forest_pct": "land_cover",
}

# response archetypes: (gain, smoothing days, dam distance or None);
# gains sit inside (0.4, 0.95) so the amplitude-ratio thresholds still
# separate the classes while no single identity swap is catastrophic
_ARCHETYPES = {
    "atmospheric": (0.85, 3.0, None),
    "shallow_groundwater": (0.62, 15.0, None),
    "deep_groundwater": (0.42, 60.0, None),
    "dammed": (0.60, 25.0, 12.0),
}
# proportions over a repeating 10-site cycle
_TYPE_CYCLE = (
    "atmospheric",
    "atmospheric",
    "shallow_groundwater",
    "atmospheric",
    "deep_groundwater",
    "atmospheric",
    "dammed",
    "atmospheric",
    "shallow_groundwater",
    "deep_groundwater",
)
_CLUSTER_OF_TYPE = {t: i for i, t in enumerate(_ARCHETYPES)}


def fixture_regime_thresholds() -> RegimeThresholds:
    """Decision regions matching the fixture's archetype geometry."""
    return RegimeThresholds(
        {
            "atmospheric": RegimeRegion(0.65, 2.0, 0.0, 25.0),
            "shallow_groundwater": RegimeRegion(0.0, 0.65, 0.0, 25.0),
            "deep_groundwater": RegimeRegion(0.0, 2.0, 25.0, 200.0),
        }
    )


@dataclass(frozen=True)
class Fixture:
    sites: tuple[SiteRecord, ...]
    split_threshold: int
    expert_attributes: tuple[str, ...]
    category_map: dict[str, str]

    def site(self, site_id: str) -> SiteRecord:
        return next(s for s in self.sites if s.site_id == site_id)


def _ema(values: np.ndarray, tau: float) -> np.ndarray:
    out = np.empty_like(values)
    out[0] = values[0]
    alpha = 1.0 / tau
    for t in range(1, len(values)):
        out[t] = out[t - 1] + alpha * (values[t] - out[t - 1])
    return out


def _make_site(
    index: int,
    site_id: str,
    n_days: int,
    start: str,
    rng: Rng,
    region: str,
    with_discharge: bool,
    with_attributes: bool,
    obs_fraction: float,
) -> SiteRecord:
    gen = rng.generator
    kind = _TYPE_CYCLE[index % len(_TYPE_CYCLE)]
    gain, tau, dam_km = _ARCHETYPES[kind]

    lat = float(gen.uniform(35.0, 47.0))
    lon = float(gen.uniform(-120.0, -75.0))
    elev = float(gen.uniform(50.0, 1800.0))
    dates = np.datetime64(start, "D") + np.arange(n_days)
    t = np.arange(n_days, dtype=np.float64)

    # mean air temperature: latitude/elevation baseline, annual cycle,
    # and AR(1) weather anomalies the climatology cannot see; anomaly
    # std of about 4 C matches mid-latitude daily variability
    base = 22.0 - 0.35 * (lat - 35.0) - 0.002 * elev
    amplitude = float(gen.uniform(9.0, 11.0))
    season = np.sin(2.0 * np.pi * (t - 105.0) / 365.25)
    anomaly = np.empty(n_days)
    anomaly[0] = gen.normal(scale=2.7)
    shocks = gen.normal(scale=2.7, size=n_days)
    for i in range(1, n_days):
        anomaly[i] = 0.8 * anomaly[i - 1] + shocks[i]
    tmean = base + amplitude * season + anomaly
    spread = 4.0 + gen.uniform(0, 1.5)
    meteo = np.empty((n_days, len(METEO_COLUMNS)))
    meteo[:, METEO_COLUMNS.index("tmean_c")] = tmean
    meteo[:, METEO_COLUMNS.index("tmax_c")] = tmean + spread
    meteo[:, METEO_COLUMNS.index("tmin_c")] = tmean - spread
    meteo[:, METEO_COLUMNS.index("dayl_s")] = 43200.0 + 14400.0 * season
    meteo[:, METEO_COLUMNS.index("swe_kgm2")] = np.maximum(0.0, -60.0 * season + gen.normal(scale=4.0, size=n_days))
    # humidity and radiation follow the season without resolving daily
    # anomalies, so they cannot stand in for air temperature
    meteo[:, METEO_COLUMNS.index("vp_pa")] = 610.0 * np.exp(0.055 * _ema(tmean, 5.0)) + gen.normal(scale=140.0, size=n_days)
    meteo[:, METEO_COLUMNS.index("srad_wm2")] = 250.0 + 120.0 * season + gen.normal(scale=35.0, size=n_days)

    precip = gen.gamma(shape=0.35, scale=6.0, size=n_days)
    discharge = None
    if with_discharge:
        runoff = _ema(precip, 8.0)
        discharge = 5.0 + 40.0 * runoff + gen.uniform(0, 2.0, size=n_days)

    # offset noise stays small: site identity must be recoverable from
    # the static attributes, not memorized per site
    offset = 5.0 + float(gen.normal(scale=0.2))
    water = offset + gain * _ema(tmean, tau) + gen.normal(scale=0.25, size=n_days)
    # the quality filter rejects sites outside [-1, 40]; the parameters
    # above keep water inside comfortably, clip only pathological tails
    water = np.clip(water, -0.9, 39.5)

    observed = np.zeros(n_days, dtype=bool)
    n_obs = int(round(obs_fraction * n_days))
    observed[np.sort(gen.choice(n_days, size=n_obs, replace=False))] = True
    water_obs = np.where(observed, water, np.nan)

    attributes: dict[str, float] = {}
    if with_attributes:
        attributes = {
            "drain_sqkm": float(gen.uniform(20.0, 2000.0)),
            "elev_relief_m": float(gen.uniform(10.0, 600.0)),
            # gw_index tracks the smoothing that actually shapes the site
            "gw_index": float(tau + gen.normal(scale=1.0)),
            "forest_pct": float(gen.uniform(5.0, 95.0)),
            "dam_dist_major": -999.0 if dam_km is None else float(dam_km),
        }

    return SiteRecord(
        site_id=site_id,
        latitude=lat,
        longitude=lon,
        elevation=elev,
        region_code=region,
        dates=dates,
        water_temp=water_obs,
        meteo=meteo,
        precip=precip,
        discharge=discharge,
        attributes=attributes,
        cluster_id=_CLUSTER_OF_TYPE[kind],
        dam_distance_km=dam_km,
    )


def make_fixture(
    seed: int = 0, n_train: int = 12, n_test: int = 8, complete: bool = False
) -> Fixture:
    """Generate the synthetic site collection.

    Training sites carry four fully observed years (2015 through 2018).
    Test sites span 2015 through 2019, observed sparsely enough to stay
    under the split threshold.  Region 04 holds at most three training
    sites.  Unless ``complete`` is set, one training and one test site
    lack streamflow and one of each lacks attributes.
    """
    if n_train < 4 or n_test < 2:
        raise ValueError("fixture needs at least 4 training and 2 test sites")
    root = Rng(seed)
    sites = []
    regions = ("01", "02", "03")
    for i in range(n_train):
        # the last two training sites form the deliberately tiny region
        region = "04" if i >= n_train - 2 else regions[i % 3]
        sites.append(
            _make_site(
                index=i,
                site_id=f"t{i:03d}",
                n_days=1461,
                start="2015-01-01",
                rng=root.child_named(f"train:{i}"),
                region=region,
                with_discharge=(complete or i != 1),
                with_attributes=(complete or i != 2),
                obs_fraction=0.97,
            )
        )
    for j in range(n_test):
        region = "04" if j >= n_test - 2 else regions[j % 3]
        sites.append(
            _make_site(
                index=j + 3,  # stagger the archetype cycle across the split
                site_id=f"v{j:03d}",
                n_days=1826,
                start="2015-01-01",
                rng=root.child_named(f"test:{j}"),
                region=region,
                with_discharge=(complete or j != 1),
                with_attributes=(complete or j != 2),
                obs_fraction=0.45,
            )
        )
    return Fixture(
        sites=tuple(sites),
        split_threshold=FIXTURE_SPLIT_THRESHOLD,
        expert_attributes=FIXTURE_EXPERT_ATTRIBUTES,
        category_map=dict(FIXTURE_CATEGORY_MAP),
    )


def _cell(value: float) -> str:
    # repr round-trips float64 exactly, so ingestion reproduces the arrays
    return repr(float(value))


def write_fixture_csvs(fixture: Fixture, directory, seed: int = 0) -> dict:
    """Materialize the fixture as the CSV bundle the command line ingests.

    Writes observations, drivers, site metadata, attributes, categories,
    the expert attribute list, and a ready-to-run ``config.json`` wired
    for a small demonstration run.  Returns a name to path map.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    sites = sorted(fixture.sites, key=lambda s: s.site_id)
    paths: dict = {}

    paths["observations"] = out / "observations.csv"
    with paths["observations"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "date", "water_temp_c"])
        for site in sites:
            for i in np.flatnonzero(site.observed_mask):
                writer.writerow([site.site_id, str(site.dates[i]), _cell(site.water_temp[i])])

    paths["drivers"] = out / "drivers.csv"
    with paths["drivers"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "date", *METEO_COLUMNS, "prcp_mm", "discharge_cfs"])
        for site in sites:
            for i in range(site.n_dates):
                row = [site.site_id, str(site.dates[i])]
                row.extend(_cell(v) for v in site.meteo[i])
                row.append(_cell(site.precip[i]))
                row.append("" if site.discharge is None else _cell(site.discharge[i]))
                writer.writerow(row)

    attr_names = sorted({name for site in sites for name in site.attributes})
    paths["attributes"] = out / "attributes.csv"
    with paths["attributes"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", *attr_names])
        for site in sites:
            if not site.attributes:
                continue
            cells = [_cell(site.attributes[n]) if n in site.attributes else "" for n in attr_names]
            writer.writerow([site.site_id, *cells])

    paths["sites"] = out / "sites.csv"
    with paths["sites"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "lat", "lon", "elev_m", "huc2", "cluster_id", "dam_distance_km"])
        for site in sites:
            writer.writerow(
                [
                    site.site_id,
                    _cell(site.latitude),
                    _cell(site.longitude),
                    _cell(site.elevation),
                    site.region_code,
                    "" if site.cluster_id is None else str(site.cluster_id),
                    "" if site.dam_distance_km is None else _cell(site.dam_distance_km),
                ]
            )

    paths["categories"] = out / "categories.csv"
    with paths["categories"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attribute", "category"])
        for name in sorted(fixture.category_map):
            writer.writerow([name, fixture.category_map[name]])

    paths["expert_attributes"] = out / "expert_attributes.txt"
    paths["expert_attributes"].write_text("".join(f"{n}\n" for n in fixture.expert_attributes))

    thresholds = fixture_regime_thresholds()
    config = {
        "data": {
            "observations": "observations.csv",
            "drivers": "drivers.csv",
            "sites": "sites.csv",
            "attributes": "attributes.csv",
            "categories": "categories.csv",
            "expert_attributes": "expert_attributes.txt",
        },
        "seed": seed,
        "threads": 1,
        "output_dir": "reports",
        "plans": ["exp1"],
        "split_threshold_dates": fixture.split_threshold,
        "dam_distance_attributes": ["dam_dist_major"],
        "importance_repeats": 2,
        "training": {
            "hidden_size": 12,
            "num_layers": 1,
            "sequence_length": 90,
            "window_shift": 45,
            "batch_size": 16,
            "max_epochs": 12,
            "patience": 12,
            "learning_rate": 0.002,
            "ensemble_size": 2,
            "preset_fields": ["weight_decay", "dropout_rate"],
            "mtl_top_k": 10,
        },
        "regime_thresholds": {
            label: {
                "ratio_min": region.ratio_min,
                "ratio_max": region.ratio_max,
                "lag_min": region.lag_min,
                "lag_max": region.lag_max,
            }
            for label, region in sorted(thresholds.regions.items())
        },
    }
    paths["config"] = out / "config.json"
    with paths["config"].open("w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="Write the synthetic CSV bundle.")
    parser.add_argument("--out", required=True, help="destination directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--train-sites", type=int, default=12)
    parser.add_argument("--test-sites", type=int, default=8)
    args = parser.parse_args(argv)
    fixture = make_fixture(seed=args.seed, n_train=args.train_sites, n_test=args.test_sites)
    paths = write_fixture_csvs(fixture, args.out, seed=args.seed)
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
