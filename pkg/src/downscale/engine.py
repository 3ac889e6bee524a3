"""Three-step model fitting, donor ensembles and the batch pipeline.

Step 1 fits global GAMs on all stations, step 2 fits per-station GAMs with
the global predictor as offset, and step 3 fits ARMA models to the PIT
residuals.  Ensembles at a target location draw members from the fitted
models of the K nearest donor stations.

Random streams: member ``j`` of target ``t`` uses
``SeedSequence(seed, spawn_key=(crc32(t), j))``.  A member first consumes
its ARMA innovations and then, for precipitation, its occurrence uniforms.
Resimulated members continue the member numbering after ``B - 1``, so every
stream is used at most once per target.
"""
from __future__ import annotations

import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import gam as G
from . import series as S
from .splines import cc, linear, sphere, tp, tp_offset

logger = logging.getLogger(__name__)

VARIABLES = ("temperature", "precipitation")
VARIANTS = ("global", "local", "local-deterministic", "full")
PARTS = {"temperature": ("temperature",), "precipitation": ("occurrence", "intensity")}
FAMILIES = {"temperature": "gaussian", "occurrence": "bernoulli", "intensity": "gamma"}


class EngineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Model formulas


def _smooth(name, data, k, offset=False):
    """A thin-plate term with k reduced to the number of distinct values,
    or None when the covariate is (nearly) constant."""
    n_unique = len(np.unique(np.asarray(data[name], dtype=float)))
    if n_unique < 3:
        logger.info("covariate %s has %d distinct values, term dropped", name, n_unique)
        return None
    return (tp_offset if offset else tp)(name, min(k, n_unique))


def global_terms(part, data, k=10, sphere_k=50):
    """Covariate effects of the global model for one model part."""
    terms = [
        _smooth("era_temp", data, k, offset=(part == "temperature")),
        _smooth("log_era_precip", data, k),
        cc("day_of_year", k),
        _smooth("log_point_elev", data, k),
        _smooth("elev_diff", data, k),
        _smooth("cell_elev_sd", data, k),
    ]
    n_loc = len(np.unique(np.column_stack([data["lon"], data["lat"]]), axis=0))
    if n_loc >= 3:
        terms.append(sphere("lon", "lat", min(sphere_k, n_loc)))
    if part == "occurrence":
        terms.append(linear("era_wet"))
    return [t for t in terms if t is not None]


def local_terms(part, data, k=10):
    """Covariate effects of a local model (gridded weather and season only)."""
    terms = [_smooth("era_temp", data, k), _smooth("log_era_precip", data, k), cc("day_of_year", k)]
    if part == "occurrence" and len(np.unique(data["era_wet"])) > 1:
        terms.append(linear("era_wet"))
    return [t for t in terms if t is not None]


def _part_data(table, variable, part):
    """Rows and response vector used to fit ``part``."""
    y = np.asarray(table[variable], dtype=float)
    if part == "occurrence":
        return table, np.where(np.isfinite(y), (y > 0).astype(float), np.nan)
    if part == "intensity":
        return table, np.where(y > 0, y, np.nan)
    return table, y


# ---------------------------------------------------------------------------
# Step 1


@dataclass
class GlobalModels:
    variable: str
    models: dict

    def __getitem__(self, part):
        return self.models[part]

    def to_dict(self):
        return {"variable": self.variable, "models": {k: m.to_dict() for k, m in self.models.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["variable"], {k: G.FittedGam.from_dict(m) for k, m in d["models"].items()})


def stack_tables(tables):
    """Concatenate per-station covariate tables, adding ``station_id``."""
    frames = []
    for sid, t in tables.items():
        f = t.copy()
        f.insert(0, "station_id", sid)
        frames.append(f)
    return pd.concat(frames, ignore_index=True)


def fit_global(tables, variable, k=10, sphere_k=50):
    """Global GAM(s) on all stations with data for ``variable``.

    ``tables`` maps station id to covariate table.
    """
    if variable not in VARIABLES:
        raise ValueError(f"unknown variable {variable!r}")
    used = {s: t for s, t in tables.items() if np.isfinite(np.asarray(t[variable], dtype=float)).any()}
    if len(used) < 2:
        raise EngineError(f"global {variable} model needs at least 2 stations, got {len(used)}")
    data = stack_tables(used)
    models = {}
    for part in PARTS[variable]:
        rows, y = _part_data(data, variable, part)
        ok = np.isfinite(y)
        terms = global_terms(part, rows.loc[ok], k, sphere_k)
        logger.info("fitting global %s model on %d rows", part, int(ok.sum()))
        models[part] = G.fit_gam(rows, FAMILIES[part], terms, y=y, name=f"global_{part}")
        models[part].fitted_eta = None  # not needed downstream; keeps artifacts small
    return GlobalModels(variable, models)


# ---------------------------------------------------------------------------
# Steps 2 and 3


@dataclass
class LocalModelBundle:
    station_id: str
    variable: str
    lon: float
    lat: float
    local: dict
    arma: S.ArmaModel | None
    global_ids: dict = field(default_factory=dict)

    def chain(self, global_models, part):
        return G.GamChain(global_models[part], self.local.get(part))

    def to_dict(self):
        return {
            "station_id": self.station_id,
            "variable": self.variable,
            "lon": self.lon,
            "lat": self.lat,
            "local": {k: m.to_dict() for k, m in self.local.items()},
            "arma": None if self.arma is None else self.arma.to_dict(),
            "global_ids": self.global_ids,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            station_id=d["station_id"],
            variable=d["variable"],
            lon=float(d["lon"]),
            lat=float(d["lat"]),
            local={k: G.FittedGam.from_dict(m) for k, m in d["local"].items()},
            arma=None if d["arma"] is None else S.ArmaModel.from_dict(d["arma"]),
            global_ids=d.get("global_ids", {}),
        )


def fit_local(table, global_models, variable, station_id=None, k=10, max_p=3, max_q=3):
    """Local offset GAM(s) and the ARMA model of the PIT residuals."""
    sid = station_id or table.attrs.get("station_id", "?")
    try:
        local, ids = {}, {}
        for part in PARTS[variable]:
            rows, y = _part_data(table, variable, part)
            ok = np.isfinite(y)
            gm = global_models[part]
            offset = gm.predict_eta(rows)
            local[part] = G.fit_gam(rows, FAMILIES[part], local_terms(part, rows.loc[ok], k), y=y,
                                    offset=offset, name=f"local_{part}_{sid}", offset_source=gm.name)
            local[part].fitted_eta = None
            ids[part] = gm.name
        cont = "temperature" if variable == "temperature" else "intensity"
        chain = G.GamChain(global_models[cont], local[cont])
        pit = S.pit_transform(np.asarray(table[variable], dtype=float), chain, table)
        arma = S.fit_arma_auto(pit.z, max_p, max_q)
    except Exception as err:
        raise EngineError(f"station {sid}: {err}") from err
    lon = float(np.asarray(table["lon"])[0])
    lat = float(np.asarray(table["lat"])[0])
    return LocalModelBundle(sid, variable, lon, lat, local, arma, ids)


def _fit_local_task(args):
    sid, table, global_models, variable, kw = args
    try:
        return sid, fit_local(table, global_models, variable, sid, **kw), None
    except EngineError as err:
        return sid, None, str(err)


def fit_all_local(tables, global_models, variable, workers=1, **kw):
    """Local bundles for every station with data; failures are logged and skipped.

    ``workers > 1`` fits stations in a process pool.  Fits are deterministic,
    so the result does not depend on the pool size.
    """
    tasks = [(sid, t, global_models, variable, kw) for sid, t in tables.items()
             if np.isfinite(np.asarray(t[variable], dtype=float)).any()]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_local_task, tasks))
    else:
        results = [_fit_local_task(t) for t in tasks]
    out = {}
    for sid, bundle, err in results:
        if bundle is None:
            logger.warning("%s", err)
        else:
            out[sid] = bundle
    return out


# ---------------------------------------------------------------------------
# Donors


@dataclass
class DonorSet:
    target: tuple
    K: int
    donor_ids: list
    distances: np.ndarray


def select_donors(target_lon, target_lat, candidates, K, exclude=None):
    """The K candidates nearest in raw (lon, lat) degrees.

    ``candidates`` maps station id to ``(lon, lat)``; ties are broken by id.
    ``exclude`` removes a station (cross-validation mode).
    """
    items = [(sid, ll) for sid, ll in candidates.items() if sid != exclude]
    if K < 1:
        raise ValueError("K must be positive")
    if len(items) < K:
        raise EngineError(f"{len(items)} candidate donors for K={K}")
    d = [float(np.hypot(ll[0] - target_lon, ll[1] - target_lat)) for _, ll in items]
    order = sorted(range(len(items)), key=lambda i: (d[i], items[i][0]))[:K]
    return DonorSet((target_lon, target_lat), K, [items[i][0] for i in order], np.array([d[i] for i in order]))


def round_robin_counts(B, K):
    """Members per donor: B // K each, the first B % K donors one more."""
    return [B // K + (i < B % K) for i in range(K)]


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class EnsembleBlock:
    target_id: str
    lon: float
    lat: float
    variable: str
    variant: str
    dates: np.ndarray
    members: np.ndarray
    donor_ids: np.ndarray
    member_index: np.ndarray
    occurrence: np.ndarray | None = None
    dropped_donors: list = field(default_factory=list)
    seed: int = 0
    rows: pd.DataFrame | None = field(default=None, repr=False)

    @property
    def B(self):
        return self.members.shape[0]

    def composition(self):
        ids, counts = np.unique(self.donor_ids, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))


def member_rng(seed, target_id, j):
    key = zlib.crc32(str(target_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key, int(j))))


def _donor_members(rows, bundle, global_models, variable, variant, rngs):
    """Members from one donor for the given per-member generators.

    Returns ``(values, occurrence)``; occurrence is None for temperature.
    """
    T = len(rows)
    n = len(rngs)
    use_local = variant != "global"
    cont = "temperature" if variable == "temperature" else "intensity"
    chain = G.GamChain(global_models[cont], bundle.local.get(cont) if use_local else None)

    if variable == "temperature" and variant in ("global", "local-deterministic"):
        return np.tile(chain.mean(rows), (n, 1)), None
    if variant == "full":
        z = S.simulate_arma(bundle.arma, T, n_series=n, rng=list(rngs))
    else:
        z = np.vstack([r.standard_normal(T) for r in rngs])
    if variable == "temperature":
        return S.gaussianize_inverse(z, chain, rows), None

    occ_chain = G.GamChain(global_models["occurrence"], bundle.local.get("occurrence") if use_local else None)
    prob = occ_chain.mean(rows)
    occ = np.vstack([(r.random(T) < prob) for r in rngs]).astype(np.int8)
    mu = chain.mean(rows)
    fam = chain.family
    values = np.zeros((n, T))
    wet = occ == 1
    if wet.any():
        u = S.special.ndtr(np.clip(z[wet], -S.Z_CAP, S.Z_CAP))
        values[wet] = fam.quantile(u, np.broadcast_to(mu, (n, T))[wet])
    # days without covariates stay missing
    values[:, ~np.isfinite(prob) | ~np.isfinite(mu)] = np.nan
    return values, occ


def simulate_ensemble(target_id, rows, donors, bundles, global_models, variable, variant="full",
                      B=150, seed=0, min_donors=2):
    """Simulate B members at a target from its donors (round-robin B/K split).

    Donors whose simulation fails are dropped and their share goes to the
    surviving donors round-robin.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variable == "precipitation" and variant == "local-deterministic":
        raise ValueError("local-deterministic is a temperature variant")
    rows = rows.reset_index(drop=True)
    dates = np.asarray(rows["date"], dtype="datetime64[D]")
    ids = list(donors.donor_ids)
    counts = round_robin_counts(B, len(ids))
    vals, occs, dids, midx = [], [], [], []
    failed = []
    j = 0
    plan = []
    for sid, c in zip(ids, counts):
        plan.append((sid, list(range(j, j + c))))
        j += c
    next_index = B
    while plan:
        sid, idx = plan.pop(0)
        try:
            v, o = _donor_members(rows, bundles[sid], global_models, variable, variant,
                                  [member_rng(seed, target_id, i) for i in idx])
        except Exception as err:  # noqa: BLE001 - any donor failure is survivable
            logger.warning("target %s: donor %s failed (%s), dropped", target_id, sid, err)
            failed.append(sid)
            alive = [d for d in ids if d not in failed]
            if len(alive) < min_donors:
                raise EngineError(f"target {target_id}: fewer than {min_donors} donors survived") from err
            extra = _reassign(len(idx), alive, next_index)
            next_index += len(idx)
            plan = _merge_plan(plan, extra)
            continue
        vals.append(v)
        occs.append(o)
        dids += [sid] * len(idx)
        midx += idx
    members = np.vstack(vals)
    occurrence = None if variable == "temperature" else np.vstack(occs)
    lon, lat = donors.target
    block = EnsembleBlock(str(target_id), lon, lat, variable, variant, dates, members,
                          np.array(dids), np.array(midx), occurrence, list(failed), seed, rows)
    return block


def _reassign(n, alive, start):
    """Round-robin assignment of ``n`` new member indices to ``alive`` donors."""
    out = {d: [] for d in alive}
    for i in range(n):
        out[alive[i % len(alive)]].append(start + i)
    return [(d, idx) for d, idx in out.items() if idx]


def _merge_plan(plan, extra):
    merged = {sid: list(idx) for sid, idx in plan}
    tail = []
    for sid, idx in extra:
        if sid in merged:
            merged[sid] += idx
        else:
            tail.append((sid, idx))
    return [(sid, merged[sid]) for sid, _ in plan] + tail


def donor_statistics(block):
    """Per-donor member-averaged statistics in donor order.

    Precipitation: total sum.  Temperature: mean and SD (ddof=1).
    """
    order = list(dict.fromkeys(block.donor_ids.tolist()))
    stats = []
    for d in order:
        m = block.members[block.donor_ids == d]
        if block.variable == "precipitation":
            stats.append([np.mean(np.nansum(m, axis=1))])
        else:
            stats.append([np.mean(np.nanmean(m, axis=1)), np.mean(np.nanstd(m, axis=1, ddof=1))])
    return order, np.asarray(stats)


def fence_outliers(values):
    """Flags for values outside [Q25 - 1.5 IQR, Q75 + 1.5 IQR].

    Quartiles use linear interpolation between order statistics; values on
    the fence are inliers.
    """
    v = np.asarray(values, dtype=float)
    q25, q75 = np.quantile(v, [0.25, 0.75])
    iqr = q75 - q25
    return (v < q25 - 1.5 * iqr) | (v > q75 + 1.5 * iqr)


def remove_outlier_donors(block, bundles=None, global_models=None):
    """Drop members of outlying donors and refill to B from the survivors.

    Refill members are assigned round-robin over the surviving donors in
    distance order and use fresh member indices.  Without ``bundles`` the
    block is only trimmed.
    """
    order, stats = donor_statistics(block)
    if len(order) < 3:
        return block
    flags = np.zeros(len(order), dtype=bool)
    for col in stats.T:
        flags |= fence_outliers(col)
    if flags.all():
        logger.warning("target %s: all donors flagged as outliers, keeping all", block.target_id)
        return block
    if not flags.any():
        return block
    drop = [d for d, f in zip(order, flags) if f]
    alive = [d for d, f in zip(order, flags) if not f]
    keep = ~np.isin(block.donor_ids, drop)
    n_missing = int((~keep).sum())
    logger.info("target %s: donors %s removed as outliers", block.target_id, drop)
    members = block.members[keep]
    occ = None if block.occurrence is None else block.occurrence[keep]
    dids = block.donor_ids[keep]
    midx = block.member_index[keep]
    if bundles is not None:
        start = int(block.member_index.max()) + 1
        for sid, idx in _reassign(n_missing, alive, start):
            v, o = _donor_members(block.rows, bundles[sid], global_models, block.variable, block.variant,
                                  [member_rng(block.seed, block.target_id, i) for i in idx])
            members = np.vstack([members, v])
            if occ is not None:
                occ = np.vstack([occ, o])
            dids = np.concatenate([dids, [sid] * len(idx)])
            midx = np.concatenate([midx, idx])
    out = EnsembleBlock(block.target_id, block.lon, block.lat, block.variable, block.variant, block.dates,
                        members, dids, midx, occ, list(block.dropped_donors) + drop, block.seed, block.rows)
    return out


def global_ensemble(target_id, rows, global_models, variable, B=150, seed=0):
    """B members from the global model alone (donor id ``global``)."""
    pseudo = LocalModelBundle("global", variable, float("nan"), float("nan"), {}, None)
    donors = DonorSet((float(np.asarray(rows["lon"])[0]), float(np.asarray(rows["lat"])[0])), 1,
                      ["global"], np.zeros(1))
    return simulate_ensemble(target_id, rows, donors, {"global": pseudo}, global_models, variable,
                             "global", B, seed, min_donors=1)


def downscale_target(target_id, rows, bundles, global_models, variable, variant, K, B=150, seed=0,
                     exclude=None):
    """Donor ensemble at one target, after outlier-donor removal."""
    if variant == "global":
        return global_ensemble(target_id, rows, global_models, variable, B, seed)
    lon = float(np.asarray(rows["lon"])[0])
    lat = float(np.asarray(rows["lat"])[0])
    cands = {sid: (b.lon, b.lat) for sid, b in bundles.items()}
    donors = select_donors(lon, lat, cands, K, exclude=exclude)
    block = simulate_ensemble(target_id, rows, donors, bundles, global_models, variable, variant, B, seed)
    return remove_outlier_donors(block, bundles, global_models)


# ---------------------------------------------------------------------------
# Artifacts


def _dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def save_models(out_dir, global_models, bundles=None):
    os.makedirs(out_dir, exist_ok=True)
    var = global_models.variable
    _dump(global_models.to_dict(), os.path.join(out_dir, f"global_{var}.json"))
    if bundles:
        ldir = os.path.join(out_dir, f"local_{var}")
        os.makedirs(ldir, exist_ok=True)
        for sid, b in bundles.items():
            _dump(b.to_dict(), os.path.join(ldir, f"{_safe(sid)}.json"))


def load_models(model_dir, variable):
    with open(os.path.join(model_dir, f"global_{variable}.json"), encoding="utf-8") as fh:
        gm = GlobalModels.from_dict(json.load(fh))
    bundles = {}
    ldir = os.path.join(model_dir, f"local_{variable}")
    if os.path.isdir(ldir):
        for name in sorted(os.listdir(ldir)):
            if name.endswith(".json"):
                with open(os.path.join(ldir, name), encoding="utf-8") as fh:
                    b = LocalModelBundle.from_dict(json.load(fh))
                bundles[b.station_id] = b
    return gm, bundles


def _safe(sid):
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in str(sid))


ENSEMBLE_COLUMNS = ["target_id", "member", "donor_id", "date", "value"]


def write_ensembles(path, blocks, meta):
    """Long-format ensemble CSV plus a JSON sidecar ``<path>.json``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(ENSEMBLE_COLUMNS) + "\n")
        for blk in blocks:
            dates = np.datetime_as_string(blk.dates, unit="D")
            B, T = blk.members.shape
            frame = pd.DataFrame({
                "target_id": blk.target_id,
                "member": np.repeat(np.arange(B), T),
                "donor_id": np.repeat(blk.donor_ids, T),
                "date": np.tile(dates, B),
                "value": blk.members.ravel(),
            })
            frame.to_csv(fh, header=False, index=False, float_format="%.6f", lineterminator="\n")
    side = dict(meta)
    side["targets"] = {b.target_id: {"dropped_donors": b.dropped_donors, "composition": b.composition()}
                       for b in blocks}
    _dump(side, path + ".json")


def read_ensembles(path):
    """``{target_id: (dates, members, donor_ids)}`` from an ensemble CSV."""
    df = pd.read_csv(path, dtype={"target_id": str, "donor_id": str})
    out = {}
    for tid, sub in df.groupby("target_id", sort=False):
        dates = np.unique(sub["date"].to_numpy().astype("datetime64[D]"))
        piv = sub.pivot(index="member", columns="date", values="value")
        donors = sub.drop_duplicates("member").set_index("member").loc[piv.index, "donor_id"].to_numpy()
        out[tid] = (dates, piv.to_numpy(), donors)
    return out
