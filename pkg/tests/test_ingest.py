import numpy as np
import pytest

from downscale import ingest as I

HEADER = "station_id,lon,lat,elev_m,date,temp_c,precip_mm,precip_q\n"


def _write(tmp_path, body, name="st.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body, encoding="utf-8")
    return p


def _station(n_p=300, n_t=300, unique=True, q="G"):
    T = max(n_p, n_t)
    dates = np.arange(np.datetime64("2000-01-01"), np.datetime64("2000-01-01") + T)
    prcp = np.full(T, np.nan)
    prcp[:n_p] = np.arange(n_p) * 0.1 if unique else np.arange(n_p) % 2
    temp = np.full(T, np.nan)
    temp[:n_t] = 1.0
    return I.StationSeries("x", 10.0, 50.0, 100.0, dates, temp, prcp, np.full(T, q, dtype=object))


def test_parse_skips_malformed(tmp_path):
    p = _write(tmp_path, "A,10,50,100,2000-01-01,1.5,0.0,\n"
                         "A,10,50,100,2000-01-02,2.5,,\n"
                         "A,10,50,100,2000-01-0x,2.5,1.0,\n"
                         "A,10,50,100,2000-01-03,,3.0,G\n")
    s = I.parse_station_file(p)
    assert len(s.dates) == 3 and s.n_skipped == 1
    np.testing.assert_array_equal(s.temperature[:2], [1.5, 2.5])
    assert np.isnan(s.precipitation[1]) and np.isnan(s.temperature[2])


def test_parse_duplicate_date_keeps_first(tmp_path):
    p = _write(tmp_path, "A,10,50,100,2000-01-01,1.0,0.0,\n"
                         "A,10,50,100,2000-01-01,9.0,0.0,\n"
                         "A,10,50,100,2000-01-02,2.0,0.0,\n")
    s = I.parse_station_file(p)
    assert s.n_skipped == 1 and s.temperature[0] == 1.0


def test_parse_negative_precip_rejected(tmp_path):
    p = _write(tmp_path, "A,10,50,100,2000-01-01,1.0,-1.0,\nA,10,50,100,2000-01-02,1.0,2.0,\n")
    s = I.parse_station_file(p)
    assert s.n_skipped == 1 and len(s.dates) == 1


def test_parse_gap_is_explicit_missing(tmp_path):
    p = _write(tmp_path, "A,10,50,100,2000-01-01,1.0,0.0,\nA,10,50,100,2000-01-04,4.0,0.0,\n")
    s = I.parse_station_file(p)
    assert len(s.dates) == 4 and np.isnan(s.temperature[1:3]).all()


def test_parse_errors(tmp_path):
    with pytest.raises(I.IngestError):
        I.parse_station_file(tmp_path / "missing.csv")
    with pytest.raises(I.IngestError):
        I.parse_station_file(_write(tmp_path, "A,10,50,100,bad,1,1,\n"))


def test_read_stations_multi(tmp_path):
    p = _write(tmp_path, "B,1,2,3,2000-01-01,1,0,\nA,4,5,6,2000-01-01,1,0,\nB,1,2,3,2000-01-02,1,0,\n")
    out = I.read_stations(p)
    assert [s.station_id for s in out] == ["B", "A"]
    assert len(out[0].dates) == 2


def test_quality_filter_rules():
    s = _station(n_p=199, n_t=500)
    (out,) = I.quality_filter([s])
    assert not out.has_precipitation and out.has_temperature

    s = _station(n_p=300, n_t=300, unique=False)
    (out,) = I.quality_filter([s])
    assert not out.has_precipitation

    s = _station()
    (out,) = I.quality_filter([s])
    np.testing.assert_array_equal(out.precipitation, s.precipitation)
    np.testing.assert_array_equal(out.temperature, s.temperature)


def test_quality_filter_masks_h_i_and_removes_empty():
    s = _station(q="H")
    assert I.quality_filter([s])[0].has_precipitation is False
    s = _station(n_t=10, q="I")
    assert I.quality_filter([s]) == []


def test_quality_filter_idempotent():
    rng = np.random.default_rng(0)
    stations = []
    for i in range(6):
        s = _station(n_p=int(rng.integers(150, 400)), n_t=int(rng.integers(150, 400)))
        s.precip_quality[rng.random(len(s.dates)) < 0.1] = "H"
        stations.append(s)
    once = I.quality_filter(stations)
    twice = I.quality_filter(once)
    assert len(once) == len(twice)
    for a, b in zip(once, twice):
        np.testing.assert_array_equal(a.precipitation, b.precipitation)
        np.testing.assert_array_equal(a.temperature, b.temperature)


def test_aggregate_hourly():
    assert I.aggregate_hourly(np.full(24, 5.0), np.full(24, 0.5)) == (5.0, 12.0)
    t, p = I.aggregate_hourly(np.full(23, 5.0), np.full(23, 0.5))
    assert np.isnan(t) and np.isnan(p)


def test_aggregate_hourly_frame_drops_incomplete():
    import pandas as pd
    times = pd.date_range("2000-01-01", periods=47, freq="h")
    df = pd.DataFrame({"cell_row": 0, "cell_col": 0, "center_lon": 0.0, "center_lat": 0.0,
                       "time": times, "temp_c": 2.0, "precip_mm": 0.25})
    out = I.aggregate_hourly_frame(df)
    assert len(out) == 1 and out["precip_mm"].iloc[0] == 6.0 and out["date"].iloc[0] == "2000-01-01"


GEOM = I.GridGeometry(lon0=10.125, lat0=50.125, n_rows=4, n_cols=4)


def test_assign_cell_center_tie_and_outside():
    assert I.assign_cell(10.375, 50.625, GEOM) == (2, 1)
    # midpoint between columns 0 and 1 goes to column 0
    assert I.assign_cell(10.25, 50.125, GEOM) == (0, 0)
    assert I.assign_cell(10.125, 50.25, GEOM) == (0, 0)
    with pytest.raises(I.IngestError):
        I.assign_cell(9.7, 50.3, GEOM)


def test_assign_cell_perturbation_invariance():
    rng = np.random.default_rng(1)
    for _ in range(200):
        r, c = rng.integers(0, 4, 2)
        lon, lat = GEOM.center(r, c)
        d = rng.uniform(-0.124, 0.124, 2)
        assert I.assign_cell(lon + d[0], lat + d[1], GEOM) == (r, c)


def _dem(values):
    # 2x2 pixels inside cell (0, 0) of GEOM
    xs = [10.05, 10.15]
    return np.array([[x, y, v] for (x, y), v in zip([(a, b) for b in [50.05, 50.15] for a in xs], values)])


def test_elevation_summary_cases():
    e = I.elevation_summary(10.1, 50.1, _dem([100, 100, 100, 100]), GEOM.bounds(0, 0))
    assert (e.point_elev, e.cell_mean_elev, e.elev_diff, e.cell_elev_sd) == (100, 100, 0, 0)
    e = I.elevation_summary(10.15, 50.15, _dem([0, 200, 0, 200]), GEOM.bounds(0, 0))
    assert (e.point_elev, e.cell_mean_elev, e.elev_diff, e.cell_elev_sd) == (200, 100, 100, 100)
    with pytest.raises(I.IngestError):
        I.elevation_summary(10.6, 50.6, _dem([1, 2, 3, 4]), GEOM.bounds(3, 3))


def test_day_of_year_calendar():
    d = np.array(["2000-02-29", "2000-12-31", "2001-12-31", "2001-01-01"], dtype="datetime64[D]")
    np.testing.assert_array_equal(I.day_of_year(d), [60, 366, 365, 1])


def test_build_covariates_transforms():
    dates = np.arange(np.datetime64("2000-02-27"), np.datetime64("2000-03-03"))
    st = I.StationSeries("s", 10.1, 50.1, 120.0, dates, np.arange(5.0), [0.0, 1.0, np.nan, 2.0, 0.0])
    grid = I.GridSeries((0, 0), (10.125, 50.125), dates[1:], np.ones(4), [0.0, np.e - 1, 3.0, 0.0])
    elev = I.ElevationSummary(120.0, 100.0, 20.0, 5.0)
    tab = I.build_covariates(st, grid, elev)
    assert len(tab) == 4
    np.testing.assert_allclose(tab["log_era_precip"], [0.0, 1.0, np.log(4.0), 0.0], atol=1e-15)
    np.testing.assert_array_equal(tab["era_wet"], [0, 1, 1, 0])
    np.testing.assert_array_equal(tab["day_of_year"], [59, 60, 61, 62])
    assert tab["log_point_elev"].iloc[0] == pytest.approx(np.log(121.0))
    assert np.isnan(tab["precipitation"].iloc[1])  # missing response row retained
    assert (tab["day_of_year"].between(1, 366)).all() and (tab["log_era_precip"] >= 0).all()


def test_build_covariates_empty_intersection():
    d1 = np.arange(np.datetime64("2000-01-01"), np.datetime64("2000-01-03"))
    d2 = np.arange(np.datetime64("2001-01-01"), np.datetime64("2001-01-03"))
    st = I.StationSeries("s", 0.0, 0.0, 0.0, d1, [1.0, 1.0], [0.0, 0.0])
    grid = I.GridSeries((0, 0), (0.0, 0.0), d2, [1.0, 1.0], [0.0, 0.0])
    with pytest.raises(I.IngestError):
        I.build_covariates(st, grid, I.ElevationSummary(0, 0, 0, 0))


def test_station_invariants():
    d = np.array(["2000-01-02", "2000-01-01"], dtype="datetime64[D]")
    with pytest.raises(I.IngestError):
        I.StationSeries("s", 0.0, 0.0, 0.0, d, [1, 1], [0, 0])
    with pytest.raises(I.IngestError):
        I.StationSeries("s", 0.0, 95.0, 0.0, d[::-1], [1, 1], [0, 0])


def test_elevation_cache_round_trip(tmp_path):
    src = {"a": I.ElevationSummary(1.5, 2.25, -0.75, 3.0)}
    I.write_elevation_cache(tmp_path / "e.csv", src)
    assert I.read_elevation_cache(tmp_path / "e.csv") == src
