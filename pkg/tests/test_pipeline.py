import numpy as np
import pandas as pd
import pytest

from downscale import pipeline as P
from downscale import synth

BASE = {"stations": "s.csv", "grid": "g.csv", "dem": "d.csv", "output_dir": "out"}


def test_config_shortcuts_and_defaults():
    cfg = P.RunConfig.from_dict({**BASE, "variable": "temperature", "variant": "local", "K": 5})
    assert cfg.variables == ["temperature"] and cfg.variants == ["local"]
    assert cfg.K == {"temperature": 5, "precipitation": 5}
    assert P.RunConfig.from_dict(BASE).K == {"temperature": 10, "precipitation": 20}
    assert P.RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", [
    {"K": 1}, {"B": 5, "K": 10}, {"seed": -1}, {"seed": 2**64}, {"variables": ["wind"]},
    {"variants": ["best"]}, {"colour": 1}, {"output_dir": ""}, {"workers": 0},
])
def test_config_validation(bad):
    with pytest.raises(P.ConfigError):
        P.RunConfig.from_dict({**BASE, **bad})


def test_clip_dates_keeps_attrs():
    t = pd.DataFrame({"date": np.arange(np.datetime64("2000-01-01"), np.datetime64("2000-01-11")),
                      "x": np.arange(10)})
    t.attrs["station_id"] = "a"
    out = P.clip_dates(t, "2000-01-03", "2000-01-05")
    assert out["x"].tolist() == [2, 3, 4] and out.attrs["station_id"] == "a"


def test_run_pipeline_with_ungauged_target(tmp_path):
    paths = synth.write(tmp_path / "d", seed=8, n_stations=10, n_days=450)
    st = pd.read_csv(paths["stations"], dtype={"station_id": str})
    # the synthetic DEM only covers cells holding stations: sit next to one
    near = st[st["station_id"] == "S002"].iloc[0]
    cfg = P.RunConfig.from_dict({
        "stations": paths["stations"], "grid": paths["grid"], "dem": paths["dem"],
        "output_dir": str(tmp_path / "o"), "variables": ["temperature"], "variants": ["full", "global"],
        "K": 3, "B": 6, "min_obs": 100, "min_unique_precip": 20, "k": 5, "sphere_k": 8, "n_boot": 20,
        "targets": [{"id": "new", "lon": near["lon"] + 0.01, "lat": near["lat"] - 0.01}, "S001"],
    })
    summary = P.run_pipeline(cfg)
    ens = pd.read_csv(tmp_path / "o/ensemble_temperature_full.csv", dtype={"target_id": str})
    assert set(ens["target_id"]) == {"new", "S001"}
    assert ens.groupby("target_id")["member"].nunique().eq(6).all()
    scores = pd.read_csv(tmp_path / "o/scores_temperature.csv", dtype={"station_id": str})
    # the ungauged target has no observations and is not scored
    assert set(scores["station_id"]) == {"S001"}
    assert summary["wall_time_s"] > 0
