"""Batch pipeline: ingest, fit, simulate, evaluate, write.

A run is described by a JSON config::

    {
      "stations": "stations.csv", "grid": "grid.csv", "dem": "dem.csv",
      "output_dir": "out",
      "variables": ["temperature", "precipitation"],
      "variants": ["full", "global"],
      "K": {"temperature": 10, "precipitation": 20}, "B": 150, "seed": 0,
      "start": null, "end": null,
      "targets": "cv",
      "write_ensembles": true, "evaluate": true, "n_boot": 1000
    }

``targets`` is ``"cv"`` (every station, its own model excluded from the
donors), a list of station ids (same, for a subset) or a list of
``{"id", "lon", "lat"}`` objects for ungauged locations.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import engine as E
from . import ingest as I
from . import verification as V

logger = logging.getLogger(__name__)

DEFAULT_K = {"temperature": 10, "precipitation": 20}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    stations: str = ""
    grid: str = ""
    dem: str = ""
    output_dir: str = "."
    variables: list = field(default_factory=lambda: ["temperature", "precipitation"])
    variants: list = field(default_factory=lambda: ["full"])
    K: dict = field(default_factory=lambda: dict(DEFAULT_K))
    B: int = 150
    seed: int = 0
    start: str | None = None
    end: str | None = None
    targets: object = "cv"
    write_ensembles: bool = True
    evaluate: bool = True
    n_boot: int = 1000
    min_obs: int = 200
    min_unique_precip: int = 40
    k: int = 10
    sphere_k: int = 50
    skill_pairs: list | None = None
    workers: int = 1

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "variable" in d:
            d["variables"] = [d.pop("variable")]
        if "variant" in d:
            d["variants"] = [d.pop("variant")]
        if isinstance(d.get("variables"), str):
            d["variables"] = [d["variables"]]
        if isinstance(d.get("variants"), str):
            d["variants"] = [d["variants"]]
        if isinstance(d.get("K"), int):
            d["K"] = {v: d["K"] for v in E.VARIABLES}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err

    def validate(self):
        for name in ("stations", "grid", "dem", "output_dir"):
            if not getattr(self, name):
                raise ConfigError(f"missing required field {name!r}")
        for v in self.variables:
            if v not in E.VARIABLES:
                raise ConfigError(f"unknown variable {v!r}")
        for v in self.variants:
            if v not in E.VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        for v in self.variables:
            k = self.K.get(v, DEFAULT_K[v])
            if k < 2:
                raise ConfigError("K must be at least 2")
            if self.B < k:
                raise ConfigError("B must be at least K")
        if int(self.workers) < 1:
            raise ConfigError("workers must be at least 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------------------


def load_inputs(cfg):
    """Parse, quality-filter and assemble covariate tables."""
    stations = I.read_stations(cfg.stations)
    stations = I.quality_filter(stations, cfg.min_obs, cfg.min_unique_precip)
    grid = I.read_grid(cfg.grid)
    dem = I.read_dem(cfg.dem)
    tables, elevs = I.assemble(stations, grid, dem)
    tables = {s: clip_dates(t, cfg.start, cfg.end) for s, t in tables.items()}
    return tables, elevs, grid, dem


def clip_dates(table, start=None, end=None):
    d = np.asarray(table["date"], dtype="datetime64[D]")
    keep = np.ones(len(d), dtype=bool)
    if start:
        keep &= d >= np.datetime64(start)
    if end:
        keep &= d <= np.datetime64(end)
    out = table.loc[keep].reset_index(drop=True)
    out.attrs = dict(table.attrs)
    return out


def target_rows(cfg, tables, grid, dem):
    """``[(target_id, rows, excluded_station)]`` for the configured targets."""
    spec = cfg.targets
    if spec == "cv":
        return [(sid, t, sid) for sid, t in tables.items()]
    out = []
    geom = I.GridGeometry.from_cells([(r, c, *g.cell_center) for (r, c), g in grid.items()])
    for item in spec:
        if isinstance(item, str):
            if item not in tables:
                raise ConfigError(f"target station {item!r} not available")
            out.append((item, tables[item], item))
            continue
        cell = I.assign_cell(float(item["lon"]), float(item["lat"]), geom)
        elev = I.elevation_summary(float(item["lon"]), float(item["lat"]), dem, geom.bounds(*cell))
        rows = I.target_covariates(float(item["lon"]), float(item["lat"]), elev, grid[cell])
        out.append((str(item["id"]), clip_dates(rows, cfg.start, cfg.end), None))
    return out


def raw_proxy(rows, variable):
    """The gridded series at a target as a one-member ensemble."""
    col = "era_temp" if variable == "temperature" else "era_precip"
    return np.asarray(rows[col], dtype=float)[None, :]


def score_rows(target_id, rows, variable, model, members):
    obs = np.asarray(rows[variable], dtype=float)
    dates = np.asarray(rows["date"], dtype="datetime64[D]")
    lon = float(np.asarray(rows["lon"])[0])
    lat = float(np.asarray(rows["lat"])[0])
    vals = V.evaluate_all(obs, members, dates, variable)
    return [V.ScoreRecord(target_id, c, model, v, lon, lat) for c, v in vals.items()]


def write_scores(path, records):
    df = pd.DataFrame([{"station_id": r.station_id, "lon": r.lon, "lat": r.lat, "model": r.model,
                        "criterion": r.criterion, "value": r.value} for r in records],
                      columns=["station_id", "lon", "lat", "model", "criterion", "value"])
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return df


def read_scores(path):
    return pd.read_csv(path, dtype={"station_id": str, "model": str, "criterion": str})


def write_skill(path, summaries):
    df = pd.DataFrame([{"criterion": s.criterion, "competitor": s.competitor, "base": s.base,
                        "skill": s.skill, "ci_low": s.ci_low, "ci_high": s.ci_high} for s in summaries],
                      columns=["criterion", "competitor", "base", "skill", "ci_low", "ci_high"])
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return df


def write_hexbin(path, frames):
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["hex_lon", "hex_lat", "criterion", "mean_value", "count"])
    df = df[["hex_lon", "hex_lat", "criterion", "mean_value", "count"]]
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return df


def hexbin_scores(scores, criterion, model, size):
    sub = scores[(scores["criterion"] == criterion) & (scores["model"] == model)]
    out = V.hexbin_aggregate(sub["lon"].to_numpy(), sub["lat"].to_numpy(), sub["value"].to_numpy(), size)
    out.insert(2, "criterion", criterion)
    return out


# ---------------------------------------------------------------------------


def run_variable(cfg, variable, tables, targets, models_dir=None):
    """Fit, simulate and score one variable.  Returns (blocks, score records)."""
    gm = E.fit_global(tables, variable, cfg.k, cfg.sphere_k)
    bundles = E.fit_all_local(tables, gm, variable, workers=cfg.workers, k=cfg.k)
    if models_dir:
        E.save_models(models_dir, gm, bundles)
    K = cfg.K.get(variable, DEFAULT_K[variable])
    blocks, records = {}, []
    for variant in cfg.variants:
        if variable == "precipitation" and variant == "local-deterministic":
            logger.info("local-deterministic is temperature-only; skipped for precipitation")
            continue
        blocks[variant] = []
        for tid, rows, excl in targets:
            try:
                blk = E.downscale_target(tid, rows, bundles, gm, variable, variant, K, cfg.B, cfg.seed,
                                         exclude=excl)
            except (E.EngineError, ValueError) as err:
                logger.warning("target %s (%s, %s) failed: %s", tid, variable, variant, err)
                continue
            blocks[variant].append(blk)
            if cfg.evaluate and excl is not None:
                records += score_rows(tid, rows, variable, variant, blk.members)
    if cfg.evaluate:
        for tid, rows, excl in targets:
            if excl is not None:
                records += score_rows(tid, rows, variable, "raw", raw_proxy(rows, variable))
    return gm, bundles, blocks, records


def run_pipeline(cfg):
    """Execute the configured run and write all outputs.  Returns a summary dict."""
    if not isinstance(cfg, RunConfig):
        cfg = RunConfig.from_dict(cfg)
    t0 = time.time()
    os.makedirs(cfg.output_dir, exist_ok=True)
    tables, elevs, grid, dem = load_inputs(cfg)
    I.write_elevation_cache(os.path.join(cfg.output_dir, "elevation.csv"), elevs)
    targets = target_rows(cfg, tables, grid, dem)
    summary = {"outputs": []}
    for variable in cfg.variables:
        gm, bundles, blocks, records = run_variable(cfg, variable, tables, targets,
                                                    os.path.join(cfg.output_dir, "models"))
        if cfg.write_ensembles:
            for variant, blks in blocks.items():
                path = os.path.join(cfg.output_dir, f"ensemble_{variable}_{variant}.csv")
                E.write_ensembles(path, blks, {"seed": cfg.seed, "variant": variant, "variable": variable,
                                               "K": cfg.K.get(variable, DEFAULT_K[variable]), "B": cfg.B})
                summary["outputs"].append(path)
        if cfg.evaluate and records:
            spath = os.path.join(cfg.output_dir, f"scores_{variable}.csv")
            scores = write_scores(spath, records)
            pairs = cfg.skill_pairs or [[v, "raw"] for v in blocks]
            skills = []
            for comp, base in pairs:
                skills += V.skill_table(scores, comp, base, cfg.n_boot, cfg.seed)
            kpath = os.path.join(cfg.output_dir, f"skill_{variable}.csv")
            write_skill(kpath, skills)
            summary["outputs"] += [spath, kpath]
    summary["wall_time_s"] = time.time() - t0
    return summary
