"""Station and grid file parsing, quality control and covariate assembly."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

STATION_COLUMNS = ["station_id", "lon", "lat", "elev_m", "date", "temp_c", "precip_mm", "precip_q"]
GRID_COLUMNS = ["cell_row", "cell_col", "center_lon", "center_lat", "date", "temp_c", "precip_mm"]
DEM_COLUMNS = ["lon", "lat", "elev_m"]
BAD_QUALITY = ("H", "I")
GRID_SPACING = 0.25


class IngestError(ValueError):
    pass


@dataclass
class StationSeries:
    """Daily observations for one station on a contiguous calendar.

    Days without a record are present with NaN values.  ``n_skipped``
    counts rows rejected while parsing.
    """

    station_id: str
    lon: float
    lat: float
    elevation: float
    dates: np.ndarray
    temperature: np.ndarray
    precipitation: np.ndarray
    precip_quality: np.ndarray | None = None
    n_skipped: int = 0

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.temperature = np.asarray(self.temperature, dtype=float)
        self.precipitation = np.asarray(self.precipitation, dtype=float)
        if len(self.dates) > 1 and np.any(np.diff(self.dates) <= np.timedelta64(0, "D")):
            raise IngestError(f"{self.station_id}: dates not strictly increasing")
        if not (-90 <= self.lat <= 90 and -180 <= self.lon <= 180):
            raise IngestError(f"{self.station_id}: coordinates out of range")
        if np.any(self.precipitation < 0):
            raise IngestError(f"{self.station_id}: negative precipitation")

    @property
    def has_temperature(self):
        return bool(np.isfinite(self.temperature).any())

    @property
    def has_precipitation(self):
        return bool(np.isfinite(self.precipitation).any())


@dataclass
class GridSeries:
    cell_id: tuple
    cell_center: tuple
    dates: np.ndarray
    era_temp: np.ndarray
    era_precip: np.ndarray

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.era_temp = np.asarray(self.era_temp, dtype=float)
        self.era_precip = np.asarray(self.era_precip, dtype=float)
        if np.any(self.era_precip < 0):
            raise IngestError(f"cell {self.cell_id}: negative precipitation")
        if len(np.unique(self.dates)) != len(self.dates):
            raise IngestError(f"cell {self.cell_id}: duplicate days")

    @property
    def era_wet(self):
        return self.era_precip > 0


@dataclass
class ElevationSummary:
    point_elev: float
    cell_mean_elev: float
    elev_diff: float
    cell_elev_sd: float


@dataclass
class GridGeometry:
    """Regular lon/lat grid given by the centre of cell (0, 0)."""

    lon0: float
    lat0: float
    n_rows: int
    n_cols: int
    spacing: float = GRID_SPACING

    def center(self, row, col):
        return self.lon0 + col * self.spacing, self.lat0 + row * self.spacing

    def bounds(self, row, col):
        lon, lat = self.center(row, col)
        h = self.spacing / 2
        return lon - h, lon + h, lat - h, lat + h

    @classmethod
    def from_cells(cls, cells, spacing=GRID_SPACING):
        """Infer the geometry from ``(row, col, lon, lat)`` records."""
        cells = np.asarray(cells, dtype=float)
        r, c, lon, lat = cells.T
        lon0 = np.median(lon - c * spacing)
        lat0 = np.median(lat - r * spacing)
        return cls(float(lon0), float(lat0), int(r.max()) + 1, int(c.max()) + 1, spacing)


# ---------------------------------------------------------------------------
# Parsing


def _read_csv(path, columns):
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as err:
        raise IngestError(f"cannot read {path}: {err}") from err
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise IngestError(f"{path}: missing columns {missing}")
    return df


def _numeric(col):
    """Parse a string column; '' is missing, anything unparsable is NaN
    and flagged in the returned mask."""
    s = col.str.strip()
    empty = s == ""
    num = pd.to_numeric(s.where(~empty), errors="coerce")
    bad = num.isna() & ~empty
    return num.to_numpy(dtype=float), bad.to_numpy()


def _parse_station_frame(df, path="<frame>"):
    dates = pd.to_datetime(df["date"].str.strip(), format="%Y-%m-%d", errors="coerce")
    lon, bad_lon = _numeric(df["lon"])
    lat, bad_lat = _numeric(df["lat"])
    elev, bad_elev = _numeric(df["elev_m"])
    temp, bad_t = _numeric(df["temp_c"])
    prcp, bad_p = _numeric(df["precip_mm"])
    bad = (dates.isna().to_numpy() | bad_lon | bad_lat | bad_elev | bad_t | bad_p
           | ~np.isfinite(lon) | ~np.isfinite(lat) | (prcp < 0)
           | (np.abs(lat) > 90) | (np.abs(lon) > 180))
    good = pd.DataFrame({
        "date": dates.to_numpy().astype("datetime64[D]"),
        "lon": lon, "lat": lat, "elev": elev, "temp": temp, "prcp": prcp,
        "q": df["precip_q"].str.strip().to_numpy(),
    })[~bad]
    n_skipped = int(bad.sum())
    dup = good["date"].duplicated(keep="first").to_numpy()
    n_skipped += int(dup.sum())
    good = good[~dup].sort_values("date")
    if n_skipped:
        logger.warning("%s: skipped %d malformed or duplicate rows", path, n_skipped)
    if good.empty:
        raise IngestError(f"{path}: no valid rows")
    return good, n_skipped


def _to_series(station_id, good, n_skipped):
    obs_dates = good["date"].to_numpy().astype("datetime64[D]")
    d0, d1 = obs_dates.min(), obs_dates.max()
    dates = np.arange(d0, d1 + np.timedelta64(1, "D"), dtype="datetime64[D]")
    idx = (obs_dates - d0).astype(int)
    temp = np.full(len(dates), np.nan)
    prcp = np.full(len(dates), np.nan)
    q = np.full(len(dates), "", dtype=object)
    temp[idx] = good["temp"].to_numpy()
    prcp[idx] = good["prcp"].to_numpy()
    q[idx] = good["q"].to_numpy()
    elev = good["elev"].dropna()
    return StationSeries(
        station_id=str(station_id),
        lon=float(good["lon"].iloc[0]),
        lat=float(good["lat"].iloc[0]),
        elevation=float(elev.iloc[0]) if len(elev) else float("nan"),
        dates=dates, temperature=temp, precipitation=prcp,
        precip_quality=q, n_skipped=n_skipped,
    )


def parse_station_file(path):
    """Parse a single-station CSV into a :class:`StationSeries`.

    Malformed rows (bad date or number, negative precipitation, coordinates
    out of range) and later duplicates of a date are skipped and counted.
    """
    df = _read_csv(path, STATION_COLUMNS)
    ids = df["station_id"].str.strip().unique()
    if len(ids) > 1:
        raise IngestError(f"{path}: several stations, use read_stations")
    good, n_skipped = _parse_station_frame(df, path)
    return _to_series(ids[0], good, n_skipped)


def read_stations(path):
    """Parse a multi-station CSV, one :class:`StationSeries` per id in
    first-appearance order."""
    df = _read_csv(path, STATION_COLUMNS)
    df["station_id"] = df["station_id"].str.strip()
    out = []
    for sid, sub in df.groupby("station_id", sort=False):
        try:
            good, n_skipped = _parse_station_frame(sub, f"{path}[{sid}]")
        except IngestError as err:
            logger.warning("%s", err)
            continue
        out.append(_to_series(sid, good, n_skipped))
    if not out:
        raise IngestError(f"{path}: no valid rows")
    return out


def read_grid(path):
    """Parse the grid CSV into ``{(row, col): GridSeries}``."""
    df = _read_csv(path, GRID_COLUMNS)
    rows, _ = _numeric(df["cell_row"])
    cols, _ = _numeric(df["cell_col"])
    lon, _ = _numeric(df["center_lon"])
    lat, _ = _numeric(df["center_lat"])
    temp, _ = _numeric(df["temp_c"])
    prcp, _ = _numeric(df["precip_mm"])
    dates = pd.to_datetime(df["date"].str.strip(), format="%Y-%m-%d", errors="coerce").to_numpy()
    frame = pd.DataFrame({"r": rows, "c": cols, "lon": lon, "lat": lat,
                          "date": dates.astype("datetime64[D]"), "t": temp, "p": prcp})
    bad = frame[["r", "c", "lon", "lat"]].isna().any(axis=1) | frame["date"].isna() | (frame["p"] < 0)
    if bad.any():
        logger.warning("%s: skipped %d malformed grid rows", path, int(bad.sum()))
    frame = frame[~bad].drop_duplicates(["r", "c", "date"], keep="first")
    out = {}
    for (r, c), sub in frame.groupby(["r", "c"], sort=True):
        sub = sub.sort_values("date")
        cell = (int(r), int(c))
        out[cell] = GridSeries(cell, (float(sub["lon"].iloc[0]), float(sub["lat"].iloc[0])),
                               sub["date"].to_numpy(), sub["t"].to_numpy(), sub["p"].to_numpy())
    if not out:
        raise IngestError(f"{path}: no valid rows")
    return out


def read_dem(path):
    """DEM point cloud as an (n, 3) array of lon, lat, elevation."""
    df = _read_csv(path, DEM_COLUMNS)
    arr = np.column_stack([_numeric(df[c])[0] for c in DEM_COLUMNS])
    return arr[np.all(np.isfinite(arr), axis=1)]


# ---------------------------------------------------------------------------
# Quality control


def quality_filter(stations, min_obs=200, min_unique_precip=40):
    """Mask low-quality precipitation and drop thinly observed variables.

    Precipitation flagged H or I is set to missing.  A variable with fewer
    than ``min_obs`` observations is dropped from a station, as is
    precipitation with fewer than ``min_unique_precip`` distinct values.
    Stations left with neither variable are removed.
    """
    out = []
    for st in stations:
        prcp = st.precipitation.copy()
        temp = st.temperature.copy()
        if st.precip_quality is not None:
            q = np.asarray(st.precip_quality, dtype=object)
            prcp[np.isin(q, BAD_QUALITY)] = np.nan
        ok_p = np.isfinite(prcp)
        if ok_p.sum() < min_obs or len(np.unique(prcp[ok_p])) < min_unique_precip:
            prcp[:] = np.nan
        if np.isfinite(temp).sum() < min_obs:
            temp[:] = np.nan
        new = replace(st, temperature=temp, precipitation=prcp)
        if new.has_temperature or new.has_precipitation:
            out.append(new)
        else:
            logger.info("station %s removed by quality filter", st.station_id)
    return out


# ---------------------------------------------------------------------------
# Gridded covariates


def aggregate_hourly(temp_hourly, precip_hourly):
    """Daily mean temperature and total precipitation from 24 hourly values.

    Returns ``(era_temp, era_precip)``; both NaN unless all 24 values of
    each variable are present.
    """
    t = np.asarray(temp_hourly, dtype=float).ravel()
    p = np.asarray(precip_hourly, dtype=float).ravel()
    if len(t) != 24 or len(p) != 24 or not (np.isfinite(t).all() and np.isfinite(p).all()):
        return float("nan"), float("nan")
    return float(t.mean()), float(p.sum())


def aggregate_hourly_frame(df):
    """Aggregate an hourly frame with columns ``cell_row, cell_col,
    center_lon, center_lat, time, temp_c, precip_mm`` into the daily grid
    schema.  Incomplete days are dropped."""
    df = df.copy()
    df["date"] = pd.to_datetime(df["time"]).dt.strftime("%Y-%m-%d")
    keys = ["cell_row", "cell_col", "center_lon", "center_lat", "date"]
    g = df.groupby(keys, sort=True)
    daily = g.agg(temp_c=("temp_c", "mean"), precip_mm=("precip_mm", "sum"),
                  n_t=("temp_c", "count"), n_p=("precip_mm", "count")).reset_index()
    complete = (daily["n_t"] == 24) & (daily["n_p"] == 24)
    return daily[complete][GRID_COLUMNS].reset_index(drop=True)


def assign_cell(lon, lat, geometry):
    """Grid cell ``(row, col)`` whose centre is nearest; midpoints go to the
    lower index."""
    g = geometry
    h = g.spacing / 2
    lon_min, lat_min = g.lon0 - h, g.lat0 - h
    lon_max = g.lon0 + (g.n_cols - 1) * g.spacing + h
    lat_max = g.lat0 + (g.n_rows - 1) * g.spacing + h
    if not (lon_min <= lon <= lon_max and lat_min <= lat <= lat_max):
        raise IngestError(f"point ({lon}, {lat}) outside grid")
    # ceil(x - 0.5) rounds exact halves down
    col = int(np.ceil(round((lon - g.lon0) / g.spacing, 9) - 0.5))
    row = int(np.ceil(round((lat - g.lat0) / g.spacing, 9) - 0.5))
    return min(max(row, 0), g.n_rows - 1), min(max(col, 0), g.n_cols - 1)


def elevation_summary(lon, lat, dem, cell_bounds):
    """Point and cell elevation statistics from a DEM point cloud.

    ``cell_bounds`` is ``(lon_min, lon_max, lat_min, lat_max)``; pixels are
    inside when ``min <= coord < max``.  The SD is the population SD.
    """
    dem = np.asarray(dem, dtype=float)
    lon_min, lon_max, lat_min, lat_max = cell_bounds
    inside = ((dem[:, 0] >= lon_min) & (dem[:, 0] < lon_max)
              & (dem[:, 1] >= lat_min) & (dem[:, 1] < lat_max))
    if not inside.any():
        raise IngestError("no DEM pixels inside the cell")
    d2 = (dem[:, 0] - lon) ** 2 + (dem[:, 1] - lat) ** 2
    point = float(dem[np.argmin(d2), 2])
    cell = dem[inside, 2]
    mean = float(cell.mean())
    return ElevationSummary(point, mean, point - mean, float(cell.std()))


def day_of_year(dates):
    d = np.asarray(dates, dtype="datetime64[D]")
    return (d - d.astype("datetime64[Y]")).astype(int) + 1


COVARIATE_COLUMNS = ["date", "day_of_year", "era_temp", "era_precip", "log_era_precip", "era_wet",
                     "log_point_elev", "elev_diff", "cell_elev_sd", "lon", "lat",
                     "temperature", "precipitation"]


def build_covariates(station, grid, elev):
    """Covariate rows for every day both the station and its cell cover.

    Days with missing observations are kept with NaN responses.
    """
    common, i_st, i_gr = np.intersect1d(station.dates, grid.dates, return_indices=True)
    if len(common) == 0:
        raise IngestError(f"{station.station_id}: no overlap with grid cell {grid.cell_id}")
    ep = grid.era_precip[i_gr]
    df = pd.DataFrame({
        "date": common,
        "day_of_year": day_of_year(common),
        "era_temp": grid.era_temp[i_gr],
        "era_precip": ep,
        "log_era_precip": np.log1p(ep),
        "era_wet": (ep > 0).astype(int),
        "log_point_elev": np.log1p(max(elev.point_elev, 0.0)),
        "elev_diff": elev.elev_diff,
        "cell_elev_sd": elev.cell_elev_sd,
        "lon": station.lon,
        "lat": station.lat,
        "temperature": station.temperature[i_st],
        "precipitation": station.precipitation[i_st],
    })
    df.attrs["station_id"] = station.station_id
    return df


def target_covariates(lon, lat, elev, grid, dates=None):
    """Covariate rows for an ungauged target (responses all missing)."""
    dates = grid.dates if dates is None else np.asarray(dates, dtype="datetime64[D]")
    st = StationSeries("target", lon, lat, elev.point_elev, dates,
                       np.full(len(dates), np.nan), np.full(len(dates), np.nan))
    return build_covariates(st, grid, elev)


def write_elevation_cache(path, summaries):
    """``summaries``: mapping station_id -> ElevationSummary."""
    rows = [{"station_id": k, "point_elev": v.point_elev, "cell_mean_elev": v.cell_mean_elev,
             "elev_diff": v.elev_diff, "cell_elev_sd": v.cell_elev_sd} for k, v in summaries.items()]
    pd.DataFrame(rows, columns=["station_id", "point_elev", "cell_mean_elev", "elev_diff",
                                "cell_elev_sd"]).to_csv(path, index=False, float_format="%.10g",
                                                         lineterminator="\n")


def read_elevation_cache(path):
    df = pd.read_csv(path, dtype={"station_id": str})
    return {r.station_id: ElevationSummary(r.point_elev, r.cell_mean_elev, r.elev_diff, r.cell_elev_sd)
            for r in df.itertuples()}


def write_covariates(path, tables):
    """All covariate tables in one long CSV keyed by ``station_id``.

    Floats are written with 17 significant digits so a read-back is exact.
    """
    frames = []
    for sid, t in tables.items():
        f = t[COVARIATE_COLUMNS].copy()
        f["date"] = np.datetime_as_string(np.asarray(f["date"], dtype="datetime64[D]"), unit="D")
        f.insert(0, "station_id", sid)
        frames.append(f)
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["station_id"] + COVARIATE_COLUMNS)
    df.to_csv(path, index=False, float_format="%.17g", na_rep="", lineterminator="\n")


def read_covariates(path):
    """Inverse of :func:`write_covariates`: ``{station_id: DataFrame}`` in file order."""
    try:
        df = pd.read_csv(path, dtype={"station_id": str, "date": str}, float_precision="round_trip",
                         encoding="utf-8")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as err:
        raise IngestError(f"cannot read {path}: {err}") from err
    missing = [c for c in ["station_id"] + COVARIATE_COLUMNS if c not in df.columns]
    if missing:
        raise IngestError(f"{path}: missing columns {missing}")
    df["date"] = df["date"].to_numpy().astype("datetime64[D]")
    tables = {}
    for sid, sub in df.groupby("station_id", sort=False):
        t = sub[COVARIATE_COLUMNS].reset_index(drop=True)
        for c in COVARIATE_COLUMNS[1:]:
            t[c] = t[c].astype(float)
        t["day_of_year"] = t["day_of_year"].astype(int)
        t["era_wet"] = t["era_wet"].astype(int)
        t.attrs["station_id"] = sid
        tables[sid] = t
    return tables


def assemble(stations, grid, dem, geometry=None):
    """Covariate tables for all stations; returns ``{station_id: DataFrame}``
    and the elevation summaries.  Stations outside the grid are skipped."""
    if geometry is None:
        geometry = GridGeometry.from_cells([(r, c, *g.cell_center) for (r, c), g in grid.items()])
    tables, elevs = {}, {}
    for st in stations:
        try:
            cell = assign_cell(st.lon, st.lat, geometry)
            if cell not in grid:
                raise IngestError(f"cell {cell} has no grid data")
            elev = elevation_summary(st.lon, st.lat, dem, geometry.bounds(*cell))
            tables[st.station_id] = build_covariates(st, grid[cell], elev)
            elevs[st.station_id] = elev
        except IngestError as err:
            logger.warning("station %s skipped: %s", st.station_id, err)
    return tables, elevs
