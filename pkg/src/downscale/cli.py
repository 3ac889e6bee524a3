"""Command-line interface: one subcommand per pipeline stage.

Every subcommand takes its settings from flags, from a JSON ``--config`` file
whose keys are the flag names with dashes replaced by underscores, or from
both (flags win).  Data go to files only; logs go to standard error.  Each
run writes a manifest JSON (settings, versions, seed, wall time) next to its
outputs.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from importlib import metadata

import numpy as np

from . import engine as E
from . import ingest as I
from . import pipeline as P
from . import synth
from . import verification as V

logger = logging.getLogger("downscale")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    """Invalid arguments or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_INVALID)


# Defaults per subcommand; ``None`` marks a required field.
DEFAULTS = {
    "synth": {"out": None, "seed": 0, "n_stations": 50, "n_days": 3000},
    "ingest": {"stations": None, "grid": None, "dem": None, "out": None, "start": None, "end": None,
               "min_obs": 200, "min_unique_precip": 40},
    "fit-global": {"covariates": None, "variable": None, "models": None, "k": 10, "sphere_k": 50},
    "fit-local": {"covariates": None, "variable": None, "models": None, "k": 10, "workers": None},
    "simulate": {"covariates": None, "models": None, "variable": None, "variant": "full", "K": None,
                 "B": 150, "seed": 0, "targets": "cv", "out": None, "start": None, "end": None},
    "evaluate": {"covariates": None, "variable": None, "ensemble": None, "scores": None, "skill": None,
                 "raw": True, "pairs": None, "n_boot": 1000, "seed": 0},
    "hexbin": {"scores": None, "criterion": None, "model": None, "size": 1.0, "out": None},
    "run": {"stations": None, "grid": None, "dem": None, "output_dir": None},
}

# Output path that decides where the manifest goes.
OUTPUT_KEY = {"synth": "out", "ingest": "out", "fit-global": "models", "fit-local": "models",
              "simulate": "out", "evaluate": "scores", "hexbin": "out", "run": "output_dir"}


def _add_common(p):
    p.add_argument("--config", help="JSON file with settings (keys are flag names, '_' for '-')")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser():
    parser = _Parser(prog="downscale", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset with known truth")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-stations", type=int)
    p.add_argument("--n-days", type=int)
    _add_common(p)

    p = sub.add_parser("ingest", help="quality-filter inputs and write covariate tables")
    p.add_argument("--stations", help="station CSV")
    p.add_argument("--grid", help="gridded daily CSV")
    p.add_argument("--dem", help="elevation CSV")
    p.add_argument("--out", help="covariate CSV to write")
    p.add_argument("--start", help="first date (YYYY-MM-DD)")
    p.add_argument("--end", help="last date (YYYY-MM-DD)")
    p.add_argument("--min-obs", type=int, help="minimum non-missing values per variable")
    p.add_argument("--min-unique-precip", type=int, help="minimum distinct precipitation values")
    _add_common(p)

    for name, hlp in (("fit-global", "fit the global GAM(s)"),
                      ("fit-local", "fit local offset GAMs and residual ARMA models")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--covariates", help="covariate CSV from ingest")
        p.add_argument("--variable", choices=E.VARIABLES)
        p.add_argument("--models", help="model directory")
        p.add_argument("--k", type=int, help="basis dimension of univariate smooths")
        if name == "fit-global":
            p.add_argument("--sphere-k", type=int, help="basis dimension of the spatial smooth")
        else:
            p.add_argument("--workers", type=int, help="worker processes (default: all CPUs)")
        _add_common(p)

    p = sub.add_parser("simulate", help="simulate donor ensembles at targets")
    p.add_argument("--covariates", help="covariate CSV from ingest")
    p.add_argument("--models", help="model directory")
    p.add_argument("--variable", choices=E.VARIABLES)
    p.add_argument("--variant", choices=E.VARIANTS)
    p.add_argument("--K", type=int, help="number of donors (default 10 temperature, 20 precipitation)")
    p.add_argument("--B", type=int, help="ensemble size")
    p.add_argument("--seed", type=int)
    p.add_argument("--targets", help="'cv' or comma-separated station ids")
    p.add_argument("--start", help="first date (YYYY-MM-DD)")
    p.add_argument("--end", help="last date (YYYY-MM-DD)")
    p.add_argument("--out", help="ensemble CSV to write")
    _add_common(p)

    p = sub.add_parser("evaluate", help="score ensembles against observations, with skill scores")
    p.add_argument("--covariates", help="covariate CSV holding the observations")
    p.add_argument("--variable", choices=E.VARIABLES)
    p.add_argument("--ensemble", action="append", metavar="MODEL=PATH", help="ensemble CSV (repeatable)")
    p.add_argument("--scores", help="score CSV to write")
    p.add_argument("--skill", help="skill CSV to write")
    p.add_argument("--no-raw", dest="raw", action="store_const", const=False,
                   help="do not score the gridded proxy as model 'raw'")
    p.add_argument("--pairs", action="append", metavar="COMPETITOR:BASE", help="skill pair (repeatable)")
    p.add_argument("--n-boot", type=int, help="bootstrap resamples")
    p.add_argument("--seed", type=int)
    _add_common(p)

    p = sub.add_parser("hexbin", help="aggregate per-station scores on a hexagonal lattice")
    p.add_argument("--scores", help="score CSV")
    p.add_argument("--criterion", help="criterion name, or 'all'")
    p.add_argument("--model", help="model name")
    p.add_argument("--size", type=float, help="hexagon circumradius in degrees")
    p.add_argument("--out", help="hexbin CSV to write")
    _add_common(p)

    p = sub.add_parser("run", help="the whole pipeline from a JSON run config")
    p.add_argument("--stations")
    p.add_argument("--grid")
    p.add_argument("--dem")
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)
    _add_common(p)
    return parser


# ---------------------------------------------------------------------------


def resolve(command, args):
    """Merge defaults, the config file and explicit flags; check required fields."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {args.config}: {err}") from err
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        if command != "run":
            unknown = set(loaded) - set(cfg)
            if unknown:
                raise UsageError(f"unknown config fields: {sorted(unknown)}")
        cfg.update(loaded)
    for key, val in vars(args).items():
        if key in ("command", "config", "log_level") or val is None:
            continue
        cfg[key] = val
    missing = [k for k, v in cfg.items() if v is None and DEFAULTS[command].get(k, 0) is None
               and k not in ("K", "workers", "skill", "pairs", "start", "end")]
    if missing:
        raise UsageError("missing required field(s): " + ", ".join(repr(m) for m in missing))
    return cfg


def _require_file(path, field):
    if not os.path.isfile(path):
        raise UsageError(f"{field}: no such file {path!r}")


def _check_common(cfg):
    if "variable" in cfg and cfg["variable"] not in E.VARIABLES:
        raise UsageError(f"variable must be one of {E.VARIABLES}")
    if "variant" in cfg and cfg["variant"] not in E.VARIANTS:
        raise UsageError(f"variant must be one of {E.VARIANTS}")
    if "seed" in cfg and not 0 <= int(cfg["seed"]) < 2**64:
        raise UsageError("seed must be a 64-bit unsigned integer")
    if cfg.get("workers") is not None and int(cfg["workers"]) < 1:
        raise UsageError("workers must be at least 1")


def _workers(cfg):
    return int(cfg.get("workers") or os.cpu_count() or 1)


def _parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# Subcommands.  Each returns the list of files written.


def cmd_synth(cfg):
    if int(cfg["n_stations"]) < 5 or int(cfg["n_days"]) < 400:
        raise UsageError("synth needs n_stations >= 5 and n_days >= 400")
    paths = synth.write(cfg["out"], seed=int(cfg["seed"]), n_stations=int(cfg["n_stations"]),
                        n_days=int(cfg["n_days"]))
    return list(paths.values())


def cmd_ingest(cfg):
    for f in ("stations", "grid", "dem"):
        _require_file(cfg[f], f)
    stations = I.quality_filter(I.read_stations(cfg["stations"]), int(cfg["min_obs"]),
                                int(cfg["min_unique_precip"]))
    tables, elevs = I.assemble(stations, I.read_grid(cfg["grid"]), I.read_dem(cfg["dem"]))
    tables = {s: P.clip_dates(t, cfg["start"], cfg["end"]) for s, t in tables.items()}
    if not tables:
        raise RuntimeError("no station survived ingest")
    out_dir = _parent(cfg["out"])
    I.write_covariates(cfg["out"], tables)
    epath = os.path.join(out_dir, "elevation.csv")
    I.write_elevation_cache(epath, elevs)
    logger.info("%d stations written to %s", len(tables), cfg["out"])
    return [cfg["out"], epath]


def cmd_fit_global(cfg):
    _require_file(cfg["covariates"], "covariates")
    tables = I.read_covariates(cfg["covariates"])
    gm = E.fit_global(tables, cfg["variable"], int(cfg["k"]), int(cfg["sphere_k"]))
    E.save_models(cfg["models"], gm)
    return [os.path.join(cfg["models"], f"global_{cfg['variable']}.json")]


def cmd_fit_local(cfg):
    _require_file(cfg["covariates"], "covariates")
    gpath = os.path.join(cfg["models"], f"global_{cfg['variable']}.json")
    _require_file(gpath, "models")
    tables = I.read_covariates(cfg["covariates"])
    gm, _ = E.load_models(cfg["models"], cfg["variable"])
    bundles = E.fit_all_local(tables, gm, cfg["variable"], workers=_workers(cfg), k=int(cfg["k"]))
    if not bundles:
        raise RuntimeError("no local model could be fitted")
    E.save_models(cfg["models"], gm, bundles)
    return [os.path.join(cfg["models"], f"local_{cfg['variable']}")]


def _targets(spec, tables):
    if spec == "cv":
        return [(sid, t, sid) for sid, t in tables.items()]
    ids = spec if isinstance(spec, list) else [s.strip() for s in str(spec).split(",") if s.strip()]
    unknown = [s for s in ids if s not in tables]
    if unknown:
        raise UsageError(f"targets not in covariates: {unknown}")
    return [(sid, tables[sid], sid) for sid in ids]


def cmd_simulate(cfg):
    variable, variant = cfg["variable"], cfg["variant"]
    K = int(cfg["K"] if cfg["K"] is not None else P.DEFAULT_K[variable])
    B = int(cfg["B"])
    if K < 2 or B < K:
        raise UsageError("need K >= 2 and B >= K")
    if variable == "precipitation" and variant == "local-deterministic":
        raise UsageError("local-deterministic is a temperature variant")
    _require_file(cfg["covariates"], "covariates")
    _require_file(os.path.join(cfg["models"], f"global_{variable}.json"), "models")
    tables = {s: P.clip_dates(t, cfg["start"], cfg["end"])
              for s, t in I.read_covariates(cfg["covariates"]).items()}
    gm, bundles = E.load_models(cfg["models"], variable)
    blocks = []
    for tid, rows, excl in _targets(cfg["targets"], tables):
        try:
            blocks.append(E.downscale_target(tid, rows, bundles, gm, variable, variant, K, B,
                                             int(cfg["seed"]), exclude=excl))
        except (E.EngineError, ValueError) as err:
            logger.warning("target %s failed: %s", tid, err)
    if not blocks:
        raise RuntimeError("no target could be simulated")
    _parent(cfg["out"])
    E.write_ensembles(cfg["out"], blocks, {"seed": int(cfg["seed"]), "variant": variant,
                                           "variable": variable, "K": K, "B": B})
    return [cfg["out"], cfg["out"] + ".json"]


def _parse_pairs(items, separator, what):
    out = []
    for item in items:
        if separator not in item:
            raise UsageError(f"{what} must look like A{separator}B, got {item!r}")
        out.append(tuple(item.split(separator, 1)))
    return out


def cmd_evaluate(cfg):
    _require_file(cfg["covariates"], "covariates")
    ens = cfg["ensemble"]
    if isinstance(ens, dict):
        ens = [f"{k}={v}" for k, v in ens.items()]
    ensembles = _parse_pairs(ens, "=", "ensemble")
    for _, path in ensembles:
        _require_file(path, "ensemble")
    variable = cfg["variable"]
    tables = I.read_covariates(cfg["covariates"])
    records = []
    for model, path in ensembles:
        for tid, (dates, members, _) in E.read_ensembles(path).items():
            if tid not in tables:
                logger.warning("ensemble target %s has no observations, skipped", tid)
                continue
            rows = tables[tid]
            rows = rows.loc[np.isin(np.asarray(rows["date"], dtype="datetime64[D]"), dates)]
            records += P.score_rows(tid, rows.reset_index(drop=True), variable, model, members)
    if cfg["raw"]:
        scored = {r.station_id for r in records}
        for tid in sorted(scored, key=list(tables).index):
            rows = tables[tid]
            records += P.score_rows(tid, rows, variable, "raw", P.raw_proxy(rows, variable))
    if not records:
        raise RuntimeError("nothing to score")
    _parent(cfg["scores"])
    scores = P.write_scores(cfg["scores"], records)
    written = [cfg["scores"]]
    if cfg["skill"]:
        pairs = _parse_pairs(cfg["pairs"], ":", "pair") if cfg["pairs"] else \
            [(m, "raw") for m, _ in ensembles if cfg["raw"]]
        skills = []
        for comp, base in pairs:
            skills += V.skill_table(scores, comp, base, int(cfg["n_boot"]), int(cfg["seed"]))
        _parent(cfg["skill"])
        P.write_skill(cfg["skill"], skills)
        written.append(cfg["skill"])
    return written


def cmd_hexbin(cfg):
    _require_file(cfg["scores"], "scores")
    if not float(cfg["size"]) > 0:
        raise UsageError("size must be positive")
    scores = P.read_scores(cfg["scores"])
    crits = sorted(scores["criterion"].unique()) if cfg["criterion"] == "all" else [cfg["criterion"]]
    frames = [P.hexbin_scores(scores, c, cfg["model"], float(cfg["size"])) for c in crits]
    frames = [f for f in frames if len(f)]
    if not frames:
        raise UsageError(f"no scores for model {cfg['model']!r} and criterion {cfg['criterion']!r}")
    _parent(cfg["out"])
    P.write_hexbin(cfg["out"], frames)
    return [cfg["out"]]


def cmd_run(cfg):
    d = dict(cfg)
    if d.get("workers") is None:
        d["workers"] = _workers(d)
    try:
        rc = P.RunConfig.from_dict(d)
    except P.ConfigError as err:
        raise UsageError(str(err)) from err
    for f in ("stations", "grid", "dem"):
        _require_file(getattr(rc, f), f)
    summary = P.run_pipeline(rc)
    return summary["outputs"]


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "fit-global": cmd_fit_global,
            "fit-local": cmd_fit_local, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
            "hexbin": cmd_hexbin, "run": cmd_run}


# ---------------------------------------------------------------------------


def versions():
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "pandas", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def manifest_path(command, cfg):
    target = cfg[OUTPUT_KEY[command]]
    if command in ("synth", "fit-global", "fit-local", "run"):
        return os.path.join(target, f"manifest_{command}.json")
    return os.path.splitext(target)[0] + ".manifest.json"


def write_manifest(command, cfg, outputs, wall_time):
    path = manifest_path(command, cfg)
    _parent(path)
    doc = {"command": command, "config": cfg, "seed": cfg.get("seed"), "versions": versions(),
           "outputs": outputs, "wall_time_s": round(wall_time, 3)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    return path


def cmd_dispatch(argv=None):
    """Parse ``argv``, run the subcommand and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=args.log_level, stream=sys.stderr, force=True,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    try:
        cfg = resolve(args.command, args)
        _check_common(cfg)
        outputs = COMMANDS[args.command](cfg)
    except UsageError as err:
        logger.error("%s", err)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001 - reported as a runtime failure
        logger.error("%s failed: %s", args.command, err)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    path = write_manifest(args.command, cfg, outputs, time.time() - t0)
    logger.info("done; manifest %s", path)
    return EXIT_OK


def main():
    sys.exit(cmd_dispatch())


if __name__ == "__main__":
    main()
