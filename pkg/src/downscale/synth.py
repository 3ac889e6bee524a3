"""Synthetic station, grid and DEM files with a known generating truth.

The gridded proxy is a smooth regional field.  Station temperature adds an
elevation-difference lapse effect, a spatially smooth station bias and
AR(1) noise.  Station precipitation thresholds a latent Gaussian process
shared with the grid (so the dry-day rate is exact by construction) and
draws gamma amounts (Var = mean * theta) through an AR(1) Gaussian copula.
The proxy precipitation is too often wet with damped amounts.  Seasonal
cycles whose amplitude varies smoothly in space give every station a local
deviation from any additive regional model.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy import signal, special, stats

from .ingest import GridGeometry, assign_cell, elevation_summary


@dataclass
class SynthTruth:
    seed: int = 0
    n_stations: int = 50
    n_days: int = 3000
    start: str = "2000-01-01"
    lon_range: tuple = (5.0, 15.0)
    lat_range: tuple = (45.0, 55.0)
    dem_spacing: float = 0.05
    # temperature
    lapse_rate: float = -0.0065
    bias_amplitude: float = 2.0
    noise_phi: float = 0.7
    noise_sd: float = 1.5
    season_amplitude: float = 2.0
    # precipitation
    dry_rate: float = 0.55
    station_noise_sd: float = 0.6
    weather_phi: float = 0.5
    intensity_log_mean: float = 1.2
    intensity_weather_coef: float = 0.4
    intensity_theta: float = 3.0
    intensity_phi: float = 0.4
    intensity_season: float = 0.4
    occurrence_season: float = 0.3
    grid_dry_rate: float = 0.3
    grid_damping: float = 0.5
    missing_rate: float = 0.02
    bad_quality_rate: float = 0.005

    def to_dict(self):
        d = asdict(self)
        d["lon_range"] = list(self.lon_range)
        d["lat_range"] = list(self.lat_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lon_range"] = tuple(d["lon_range"])
        d["lat_range"] = tuple(d["lat_range"])
        return cls(**d)


def dem_elevation(lon, lat):
    """Deterministic terrain: a broad ridge plus small-scale relief (m)."""
    broad = 600 + 500 * np.sin(0.5 * (lon - 5)) * np.cos(0.4 * (lat - 45))
    fine = 150 * np.sin(9 * lon) * np.cos(11 * lat) + 80 * np.cos(23 * lon + 17 * lat)
    return np.maximum(broad + fine, 0.0)


def station_bias(lon, lat, amplitude):
    """Spatially smooth temperature bias of station climate vs the proxy."""
    return amplitude * np.sin(0.6 * (lon - 5)) * np.cos(0.5 * (lat - 45))


def local_pattern(lon, lat):
    """Smooth field in [-1, 1] scaling station-specific seasonal effects.

    It multiplies a seasonal cycle, so an additive model in location and
    day of year cannot represent it; only the local models can.
    """
    return np.cos(0.7 * (lon - 5) + 0.4) * np.sin(0.5 * (lat - 45) + 0.8)


def _ar1(rng, phi, sd, shape):
    """Stationary AR(1) series along the last axis with marginal SD ``sd``."""
    x = np.empty(shape)
    innov = rng.standard_normal(shape) * sd * np.sqrt(1 - phi**2)
    x[..., 0] = rng.standard_normal(shape[:-1]) * sd
    # x_t = phi x_{t-1} + e_t with the initial state carried by zi
    x[..., 1:] = signal.lfilter([1.0], [1.0, -phi], innov[..., 1:], axis=-1,
                                zi=(phi * x[..., :1]))[0]
    return x


def generate(truth=None, **overrides):
    """Simulate the synthetic data set.

    Returns ``(stations, grid, dem)`` DataFrames in the file schemas.
    """
    t = truth or SynthTruth()
    if overrides:
        t = SynthTruth.from_dict({**t.to_dict(), **overrides})
    if t.n_stations < 5 or t.n_days < 400:
        raise ValueError("synthetic data needs n_stations >= 5 and n_days >= 400")
    rng = np.random.default_rng(t.seed)
    T, N = t.n_days, t.n_stations
    dates = np.arange(np.datetime64(t.start), np.datetime64(t.start) + T, dtype="datetime64[D]")
    doy = (dates - dates.astype("datetime64[Y]")).astype(int) + 1

    lon0, lon1 = t.lon_range
    lat0, lat1 = t.lat_range
    geom = GridGeometry(lon0 + 0.125, lat0 + 0.125, int(round((lat1 - lat0) / 0.25)),
                        int(round((lon1 - lon0) / 0.25)))
    s_lon = np.round(rng.uniform(lon0 + 0.5, lon1 - 0.5, N), 4)
    s_lat = np.round(rng.uniform(lat0 + 0.5, lat1 - 0.5, N), 4)
    cells = [assign_cell(a, b, geom) for a, b in zip(s_lon, s_lat)]
    ucells = sorted(set(cells))
    cell_index = {c: i for i, c in enumerate(ucells)}

    # DEM pixels inside every used cell
    n_sub = int(round(0.25 / t.dem_spacing))
    offs = (np.arange(n_sub) + 0.5) * t.dem_spacing
    dem_rows = []
    for r, c in ucells:
        lmin, _, bmin, _ = geom.bounds(r, c)
        gx, gy = np.meshgrid(lmin + offs, bmin + offs)
        gx, gy = np.round(gx.ravel(), 6), np.round(gy.ravel(), 6)
        dem_rows.append(np.column_stack([gx, gy, np.round(dem_elevation(gx, gy), 2)]))
    dem = np.unique(np.vstack(dem_rows), axis=0)
    elev = [elevation_summary(a, b, dem, geom.bounds(*c)) for a, b, c in zip(s_lon, s_lat, cells)]
    elev_diff = np.array([e.elev_diff for e in elev])
    point_elev = np.array([e.point_elev for e in elev])
    cell_mean = {c: e.cell_mean_elev for c, e in zip(cells, elev)}

    # ---- gridded proxy
    C = len(ucells)
    c_lon = np.array([geom.center(r, c)[0] for r, c in ucells])
    c_lat = np.array([geom.center(r, c)[1] for r, c in ucells])
    c_elev = np.array([cell_mean[c] for c in ucells])
    season = 9.0 * np.cos(2 * np.pi * (doy - 200) / 365.25)
    anomaly = _ar1(rng, 0.8, 3.0, (1, T))[0]
    cell_anom = _ar1(rng, 0.5, 0.5, (C, T))
    era_temp = (11 - 0.6 * (c_lat[:, None] - 50) + season[None, :] + anomaly[None, :]
                + cell_anom + t.lapse_rate * c_elev[:, None])

    w_sd = 1.0
    weather = _ar1(rng, t.weather_phi, w_sd, (1, T))[0]
    cell_noise = rng.standard_normal((C, T)) * 0.3
    w_cell = weather[None, :] + cell_noise
    g_thr = stats.norm.ppf(t.grid_dry_rate) * np.sqrt(w_sd**2 + 0.3**2)
    era_prcp = np.where(w_cell > g_thr, t.grid_damping * np.exp(0.8 * (w_cell - g_thr)) - t.grid_damping + 0.1, 0.0)

    # ---- stations
    ci = np.array([cell_index[c] for c in cells])
    noise = _ar1(rng, t.noise_phi, t.noise_sd, (N, T))
    bias = station_bias(s_lon, s_lat, t.bias_amplitude)
    pattern = local_pattern(s_lon, s_lat)[:, None]
    cycle = np.cos(2 * np.pi * (doy - 30) / 365.25)[None, :]
    temp = (era_temp[ci] + t.lapse_rate * elev_diff[:, None] + bias[:, None]
            + t.season_amplitude * pattern * cycle + noise)

    s_noise = rng.standard_normal((N, T)) * t.station_noise_sd
    latent = w_cell[ci] + s_noise
    sd_lat = np.sqrt(w_sd**2 + 0.3**2 + t.station_noise_sd**2)
    thr = stats.norm.ppf(t.dry_rate) * sd_lat
    wet = latent > thr + t.occurrence_season * sd_lat * pattern * cycle
    mu = np.exp(t.intensity_log_mean + t.intensity_weather_coef * (latent - thr) / sd_lat
                + 0.0003 * (point_elev[:, None] - 500) + t.intensity_season * pattern * cycle)
    cop = _ar1(rng, t.intensity_phi, 1.0, (N, T))
    u = np.clip(special.ndtr(cop), 1e-12, 1 - 1e-12)
    amount = special.gammaincinv(mu / t.intensity_theta, u) * t.intensity_theta
    prcp = np.where(wet, np.maximum(amount, 1e-3), 0.0)

    miss_t = rng.random((N, T)) < t.missing_rate
    miss_p = rng.random((N, T)) < t.missing_rate
    bad_q = rng.random((N, T)) < t.bad_quality_rate
    temp = np.where(miss_t, np.nan, temp)
    prcp = np.where(miss_p, np.nan, prcp)

    ids = [f"S{i:03d}" for i in range(N)]
    date_str = np.datetime_as_string(dates, unit="D")
    stations = pd.DataFrame({
        "station_id": np.repeat(ids, T),
        "lon": np.repeat(s_lon, T),
        "lat": np.repeat(s_lat, T),
        "elev_m": np.repeat(point_elev, T),
        "date": np.tile(date_str, N),
        "temp_c": temp.ravel(),
        "precip_mm": prcp.ravel(),
        "precip_q": np.where(bad_q.ravel(), "H", ""),
    })
    grid = pd.DataFrame({
        "cell_row": np.repeat([r for r, _ in ucells], T),
        "cell_col": np.repeat([c for _, c in ucells], T),
        "center_lon": np.repeat(c_lon, T),
        "center_lat": np.repeat(c_lat, T),
        "date": np.tile(date_str, C),
        "temp_c": era_temp.ravel(),
        "precip_mm": era_prcp.ravel(),
    })
    dem_df = pd.DataFrame(dem, columns=["lon", "lat", "elev_m"])
    return stations, grid, dem_df, t


def write(out_dir, truth=None, **overrides):
    """Write ``stations.csv``, ``grid.csv``, ``dem.csv`` and ``truth.json``."""
    stations, grid, dem, t = generate(truth, **overrides)
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f"{k}.csv") for k in ("stations", "grid", "dem")}
    stations.to_csv(paths["stations"], index=False, float_format="%.4f", na_rep="", lineterminator="\n")
    grid.to_csv(paths["grid"], index=False, float_format="%.4f", lineterminator="\n")
    dem.to_csv(paths["dem"], index=False, float_format="%.6g", lineterminator="\n")
    paths["truth"] = os.path.join(out_dir, "truth.json")
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(t.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths
