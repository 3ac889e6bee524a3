"""Walk through the three modelling steps at a single synthetic station.

1. fit the global temperature GAM on all stations,
2. fit the station's offset GAM on top of it,
3. fit an ARMA model to the PIT residuals,

then draw a small ensemble for the station from its neighbours and compare
its lag-1 autocorrelation with the observations.

    python3 demos/one_station.py
"""
import tempfile

import numpy as np

from downscale import engine as E
from downscale import ingest as I
from downscale import series as S
from downscale import synth
from downscale import verification as V


def main():
    out = tempfile.mkdtemp()
    paths = synth.write(out, seed=1, n_stations=15, n_days=1500)
    stations = I.quality_filter(I.read_stations(paths["stations"]))
    tables, _ = I.assemble(stations, I.read_grid(paths["grid"]), I.read_dem(paths["dem"]))

    gm = E.fit_global(tables, "temperature", k=8, sphere_k=20)
    print("global temperature model: edf per smooth", np.round(gm["temperature"].edf_blocks, 2))

    sid, rows = next(iter(tables.items()))
    bundle = E.fit_local(rows, gm, "temperature", sid, k=8)
    print(f"station {sid}: local intercept shift {bundle.local['temperature'].coef[0]:+.3f} degC")
    print(f"station {sid}: residual ARMA order {bundle.arma.order}, ar {np.round(bundle.arma.ar, 3)}, "
          f"ma {np.round(bundle.arma.ma, 3)}")

    chain = bundle.chain(gm, "temperature")
    z = S.pit_transform(rows["temperature"].to_numpy(), chain, rows).z
    print(f"PIT residuals: mean {np.nanmean(z):+.3f}, sd {np.nanstd(z):.3f}")

    bundles = E.fit_all_local(tables, gm, "temperature", k=8)
    blk = E.downscale_target(sid, rows, bundles, gm, "temperature", "full", K=5, B=30, seed=0, exclude=sid)
    obs = rows["temperature"].to_numpy()
    dates = np.asarray(rows["date"], dtype="datetime64[D]")

    def lag1(x):
        ok = np.isfinite(x[:-1]) & np.isfinite(x[1:])
        return np.corrcoef(x[:-1][ok], x[1:][ok])[0, 1]

    print(f"ensemble of {blk.B} members from donors {sorted(blk.composition())}")
    print(f"lag-1 autocorrelation: observed {lag1(obs):.3f}, simulated {np.mean([lag1(m) for m in blk.members]):.3f}")
    scores = V.evaluate_all(obs, blk.members, dates, "temperature")
    print("scores:", {k: round(v, 4) for k, v in scores.items()})


if __name__ == "__main__":
    main()
