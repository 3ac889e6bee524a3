import json

import pandas as pd
import pytest

from downscale import cli
from downscale import ingest as I


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.cmd_dispatch(["synth", "--out", str(d / "data"), "--seed", "4", "--n-stations", "10",
                             "--n-days", "500", "--log-level", "WARNING"]) == 0
    assert cli.cmd_dispatch(["ingest", "--stations", str(d / "data/stations.csv"), "--grid",
                             str(d / "data/grid.csv"), "--dem", str(d / "data/dem.csv"),
                             "--out", str(d / "cov.csv"), "--min-obs", "100", "--min-unique-precip", "20",
                             "--log-level", "WARNING"]) == 0
    for cmd in ("fit-global", "fit-local"):
        args = [cmd, "--covariates", str(d / "cov.csv"), "--variable", "temperature", "--models",
                str(d / "models"), "--k", "5", "--log-level", "WARNING"]
        if cmd == "fit-global":
            args += ["--sphere-k", "8"]
        else:
            args += ["--workers", "1"]
        assert cli.cmd_dispatch(args) == 0
    return d


def _simulate(d, out, variant="full"):
    return cli.cmd_dispatch(["simulate", "--covariates", str(d / "cov.csv"), "--models", str(d / "models"),
                             "--variable", "temperature", "--variant", variant, "--K", "4", "--B", "12",
                             "--seed", "3", "--out", str(out), "--log-level", "WARNING"])


def test_ingest_outputs_and_manifest(work):
    tables = I.read_covariates(work / "cov.csv")
    assert len(tables) == 10
    man = json.loads((work / "cov.manifest.json").read_text())
    assert man["command"] == "ingest" and man["config"]["min_obs"] == 100
    assert set(man["versions"]) >= {"python", "numpy", "scipy"}
    assert man["wall_time_s"] >= 0
    assert json.loads((work / "models/manifest_fit-global.json").read_text())["config"]["sphere_k"] == 8


def test_simulate_is_reentrant_byte_identical(work):
    assert _simulate(work, work / "e1.csv") == 0
    first = (work / "e1.csv").read_bytes()
    assert _simulate(work, work / "e1.csv") == 0
    assert (work / "e1.csv").read_bytes() == first
    ens = pd.read_csv(work / "e1.csv")
    assert ens.groupby("target_id")["member"].nunique().eq(12).all()
    assert json.loads((work / "e1.manifest.json").read_text())["seed"] == 3


def test_evaluate_and_hexbin(work):
    assert _simulate(work, work / "eg.csv", "global") == 0
    assert _simulate(work, work / "ef.csv") == 0
    rc = cli.cmd_dispatch(["evaluate", "--covariates", str(work / "cov.csv"), "--variable", "temperature",
                           "--ensemble", f"full={work / 'ef.csv'}", "--ensemble", f"global={work / 'eg.csv'}",
                           "--scores", str(work / "s.csv"), "--skill", str(work / "k.csv"),
                           "--pairs", "full:raw", "--pairs", "full:global", "--n-boot", "50",
                           "--log-level", "WARNING"])
    assert rc == 0
    scores = pd.read_csv(work / "s.csv")
    assert list(scores.columns) == ["station_id", "lon", "lat", "model", "criterion", "value"]
    assert set(scores["model"]) == {"full", "global", "raw"}
    skill = pd.read_csv(work / "k.csv")
    assert list(skill.columns) == ["criterion", "competitor", "base", "skill", "ci_low", "ci_high"]
    assert set(skill["base"]) == {"raw", "global"}
    cfg = work / "hex.json"
    cfg.write_text(json.dumps({"scores": str(work / "s.csv"), "criterion": "all", "model": "full",
                               "size": 2.0, "out": str(work / "h.csv")}))
    assert cli.cmd_dispatch(["hexbin", "--config", str(cfg), "--log-level", "WARNING"]) == 0
    hx = pd.read_csv(work / "h.csv")
    assert list(hx.columns) == ["hex_lon", "hex_lat", "criterion", "mean_value", "count"]
    assert hx.groupby("criterion")["count"].sum().eq(10).all()


def test_missing_field_is_validation_error(work, capsys):
    rc = cli.cmd_dispatch(["evaluate", "--covariates", str(work / "cov.csv"), "--variable", "temperature",
                           "--ensemble", f"full={work / 'e1.csv'}"])
    assert rc == 1
    assert "'scores'" in capsys.readouterr().err


def test_unknown_flag_and_no_command(capsys):
    assert cli.cmd_dispatch(["simulate", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.cmd_dispatch([]) == 1
    assert cli.cmd_dispatch(["nope"]) == 1


def test_help_exits_zero(capsys):
    assert cli.cmd_dispatch(["--help"]) == 0
    out = capsys.readouterr().out
    for name in cli.COMMANDS:
        assert name in out


def test_invalid_values(work, tmp_path):
    base = ["simulate", "--covariates", str(work / "cov.csv"), "--models", str(work / "models"),
            "--variable", "temperature", "--out", str(tmp_path / "x.csv"), "--log-level", "ERROR"]
    assert cli.cmd_dispatch(base + ["--K", "1"]) == 1
    assert cli.cmd_dispatch(base + ["--K", "5", "--B", "4"]) == 1
    assert cli.cmd_dispatch(base + ["--seed", "-1"]) == 1
    assert cli.cmd_dispatch(base + ["--targets", "nope"]) == 1
    assert cli.cmd_dispatch(["ingest", "--stations", str(tmp_path / "none.csv"), "--grid", "g", "--dem", "d",
                             "--out", str(tmp_path / "c.csv"), "--log-level", "ERROR"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scores": "s.csv", "colour": "red"}))
    assert cli.cmd_dispatch(["hexbin", "--config", str(bad), "--log-level", "ERROR"]) == 1


def test_runtime_failure_exit_2(work, tmp_path):
    one = I.read_covariates(work / "cov.csv")
    I.write_covariates(tmp_path / "one.csv", dict(list(one.items())[:1]))
    rc = cli.cmd_dispatch(["fit-global", "--covariates", str(tmp_path / "one.csv"), "--variable", "temperature",
                           "--models", str(tmp_path / "m"), "--log-level", "ERROR"])
    assert rc == 2


def test_run_subcommand_from_config(work, tmp_path):
    cfg = {"stations": str(work / "data/stations.csv"), "grid": str(work / "data/grid.csv"),
           "dem": str(work / "data/dem.csv"), "output_dir": str(tmp_path / "run"),
           "variables": ["temperature"], "variants": ["full"], "K": 4, "B": 10, "n_boot": 20,
           "min_obs": 100, "min_unique_precip": 20, "k": 5, "sphere_k": 8, "workers": 1}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    assert cli.cmd_dispatch(["run", "--config", str(path), "--log-level", "WARNING"]) == 0
    out = tmp_path / "run"
    for name in ("ensemble_temperature_full.csv", "scores_temperature.csv", "skill_temperature.csv",
                 "manifest_run.json"):
        assert (out / name).is_file()
    path.write_text(json.dumps({**cfg, "B": 2}))
    assert cli.cmd_dispatch(["run", "--config", str(path), "--log-level", "ERROR"]) == 1
