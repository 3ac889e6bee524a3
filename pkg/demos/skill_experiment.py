"""Cross-validated downscaling experiment on synthetic data.

Every station is downscaled from its neighbours' models only, scored
against its own observations, and the full model is compared with the raw
gridded proxy and the global-only model through skill scores with station
bootstrap intervals.  A reduced version of the acceptance experiment; it
takes about a minute.

    python3 demos/skill_experiment.py [n_stations] [n_days]
"""
import sys
import tempfile

from downscale import pipeline as P
from downscale import synth
from downscale import verification as V


def main(n_stations=25, n_days=1500):
    out = tempfile.mkdtemp()
    paths = synth.write(out, seed=0, n_stations=n_stations, n_days=n_days)
    cfg = P.RunConfig(stations=paths["stations"], grid=paths["grid"], dem=paths["dem"], output_dir=out,
                      variables=["temperature"], variants=["full", "global"], K={"temperature": 10},
                      B=50, n_boot=500, k=8, sphere_k=25)
    tables, _, grid, dem = P.load_inputs(cfg)
    targets = P.target_rows(cfg, tables, grid, dem)
    _, _, _, records = P.run_variable(cfg, "temperature", tables, targets)
    scores = P.write_scores(f"{out}/scores.csv", records)
    for base in ("raw", "global"):
        print(f"full vs {base}")
        for s in V.skill_table(scores, "full", base, cfg.n_boot):
            print(f"  {s.criterion:<5} {s.skill:+.3f}  [{s.ci_low:+.3f}, {s.ci_high:+.3f}]")
    hexes = P.hexbin_scores(scores, "IQD", "full", size=2.0)
    print("IQD of the full model on a 2-degree hexagonal lattice:")
    print(hexes.to_string(index=False))


if __name__ == "__main__":
    main(*map(int, sys.argv[1:3]))
