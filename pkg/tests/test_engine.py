import hashlib

import numpy as np
import pytest

from downscale import engine as E
from downscale import ingest as I
from downscale import synth


@pytest.fixture(scope="module")
def tables(tmp_path_factory):
    d = tmp_path_factory.mktemp("syn")
    p = synth.write(d, seed=11, n_stations=12, n_days=900)
    st = I.quality_filter(I.read_stations(p["stations"]))
    tabs, _ = I.assemble(st, I.read_grid(p["grid"]), I.read_dem(p["dem"]))
    return tabs


@pytest.fixture(scope="module")
def temp_models(tables):
    gm = E.fit_global(tables, "temperature", k=6, sphere_k=10)
    return gm, E.fit_all_local(tables, gm, "temperature", k=6)


@pytest.fixture(scope="module")
def precip_models(tables):
    gm = E.fit_global(tables, "precipitation", k=6, sphere_k=10)
    return gm, E.fit_all_local(tables, gm, "precipitation", k=6)


def test_select_donors_order_ties_and_exclusion():
    cands = {"b": (1.0, 0.0), "a": (0.0, 1.0), "c": (3.0, 0.0), "t": (0.0, 0.0)}
    d = E.select_donors(0.0, 0.0, cands, 2, exclude="t")
    assert d.donor_ids == ["a", "b"]
    np.testing.assert_allclose(d.distances, [1.0, 1.0])
    assert E.select_donors(0.0, 0.0, cands, 1).donor_ids == ["t"]
    with pytest.raises(E.EngineError):
        E.select_donors(0.0, 0.0, cands, 4, exclude="t")


def test_round_robin_counts():
    assert E.round_robin_counts(150, 10) == [15] * 10
    assert E.round_robin_counts(150, 20) == [8] * 10 + [7] * 10
    c = E.round_robin_counts(150, 7)
    assert sum(c) == 150 and max(c) - min(c) == 1 and c == sorted(c, reverse=True)


def test_fence_hand_case():
    np.testing.assert_array_equal(E.fence_outliers([10, 10, 10, 10, 100]), [0, 0, 0, 0, 1])
    # Q25=1, Q75=3, fences -2 and 6: boundary values stay
    np.testing.assert_array_equal(E.fence_outliers([1, 1, 3, 3, 6, -2]), [0] * 6)
    assert not E.fence_outliers([5.0, 5.0, 5.0]).any()


def test_member_rng_streams():
    a = E.member_rng(0, "x", 0).random(3)
    np.testing.assert_array_equal(a, E.member_rng(0, "x", 0).random(3))
    assert not np.array_equal(a, E.member_rng(0, "x", 1).random(3))
    assert not np.array_equal(a, E.member_rng(0, "y", 0).random(3))
    assert not np.array_equal(a, E.member_rng(1, "x", 0).random(3))


def test_global_ensemble_temperature_is_global_mean(tables, temp_models):
    gm, _ = temp_models
    sid, rows = next(iter(tables.items()))
    blk = E.downscale_target(sid, rows, {}, gm, "temperature", "global", 5, B=12)
    assert blk.B == 12 and set(blk.donor_ids) == {"global"}
    chain = E.G.GamChain(gm["temperature"])
    np.testing.assert_array_equal(blk.members, np.tile(chain.mean(rows), (12, 1)))


def test_temperature_full_ensemble_invariants(tables, temp_models):
    gm, bundles = temp_models
    sid, rows = next(iter(tables.items()))
    blk = E.downscale_target(sid, rows, bundles, gm, "temperature", "full", 5, B=23, seed=4, exclude=sid)
    assert blk.members.shape == (23, len(rows))
    assert sid not in blk.donor_ids
    assert sorted(blk.composition().values(), reverse=True) == E.round_robin_counts(23, 5)
    assert np.isfinite(blk.members).all()
    ld = E.downscale_target(sid, rows, bundles, gm, "temperature", "local-deterministic", 5, B=10,
                            exclude=sid)
    for d in set(ld.donor_ids):
        m = ld.members[ld.donor_ids == d]
        np.testing.assert_array_equal(m, np.broadcast_to(m[0], m.shape))


def test_precipitation_hurdle_zeros(tables, precip_models):
    gm, bundles = precip_models
    sid, rows = list(tables.items())[2]
    for variant in ("full", "local", "global"):
        blk = E.downscale_target(sid, rows, bundles, gm, "precipitation", variant, 4, B=16, seed=1,
                                 exclude=sid)
        fin = np.isfinite(blk.members)
        assert np.all(blk.members[fin & (blk.occurrence == 0)] == 0.0)
        assert np.all(blk.members[fin & (blk.occurrence == 1)] > 0.0)
        assert 0.2 < blk.occurrence.mean() < 0.8
    with pytest.raises(ValueError):
        E.downscale_target(sid, rows, bundles, gm, "precipitation", "local-deterministic", 4, B=16)


def test_determinism_byte_exact(tables, precip_models, tmp_path):
    gm, bundles = precip_models
    sid, rows = list(tables.items())[1]
    digests = []
    for i in range(2):
        blk = E.downscale_target(sid, rows, bundles, gm, "precipitation", "full", 4, B=12, seed=9,
                                 exclude=sid)
        path = tmp_path / f"e{i}.csv"
        E.write_ensembles(str(path), [blk], {"seed": 9})
        digests.append((hashlib.sha256(blk.members.tobytes()).hexdigest(), path.read_bytes()))
    assert digests[0] == digests[1]
    other = E.downscale_target(sid, rows, bundles, gm, "precipitation", "full", 4, B=12, seed=10,
                               exclude=sid)
    assert hashlib.sha256(other.members.tobytes()).hexdigest() != digests[0][0]


def test_outlier_donor_removed_and_refilled(tables, temp_models):
    gm, bundles = temp_models
    sid, rows = next(iter(tables.items()))
    donors = E.select_donors(float(rows["lon"][0]), float(rows["lat"][0]),
                             {s: (b.lon, b.lat) for s, b in bundles.items()}, 5, exclude=sid)
    blk = E.simulate_ensemble(sid, rows, donors, bundles, gm, "temperature", "full", B=20, seed=2)
    bad = donors.donor_ids[4]
    blk.members[blk.donor_ids == bad] += 50.0
    out = E.remove_outlier_donors(blk, bundles, gm)
    assert out.dropped_donors == [bad] and bad not in out.donor_ids
    assert out.B == 20
    refill = out.member_index[out.member_index >= 20]
    np.testing.assert_array_equal(np.sort(refill), np.arange(20, 24))
    counts = out.composition()
    assert [counts[d] for d in donors.donor_ids[:4]] == [5, 5, 5, 5]
    trimmed = E.remove_outlier_donors(blk)
    assert trimmed.B == 16


def test_outlier_statistics_hand_block():
    members = np.array([[5.0, 5.0]] * 4 + [[50.0, 50.0]])
    blk = E.EnsembleBlock("t", 0.0, 0.0, "precipitation", "full", np.arange(2), members,
                          np.array(list("abcde")), np.arange(5), np.ones((5, 2), dtype=np.int8))
    order, stats = E.donor_statistics(blk)
    assert order == list("abcde")
    np.testing.assert_array_equal(stats[:, 0], [10, 10, 10, 10, 100])
    out = E.remove_outlier_donors(blk)
    assert out.dropped_donors == ["e"] and out.B == 4


def test_local_model_picks_up_station_bias(tables, temp_models):
    gm, bundles = temp_models
    sid, rows = next(iter(tables.items()))
    shifted = rows.copy()
    shifted["temperature"] = shifted["temperature"] + 2.0
    shifted.attrs = dict(rows.attrs)
    b = E.fit_local(shifted, gm, "temperature", sid, k=6)
    base = bundles[sid].local["temperature"].coef[0]
    assert b.local["temperature"].coef[0] - base == pytest.approx(2.0, abs=1e-6)


def test_model_artifacts_round_trip(tables, precip_models, tmp_path):
    gm, bundles = precip_models
    E.save_models(str(tmp_path), gm, bundles)
    gm2, b2 = E.load_models(str(tmp_path), "precipitation")
    assert set(b2) == set(bundles)
    sid, rows = next(iter(tables.items()))
    a = E.downscale_target(sid, rows, bundles, gm, "precipitation", "full", 4, B=8, exclude=sid)
    b = E.downscale_target(sid, rows, b2, gm2, "precipitation", "full", 4, B=8, exclude=sid)
    np.testing.assert_array_equal(a.members, b.members)
    E.write_ensembles(str(tmp_path / "e.csv"), [a], {})
    dates, members, donor_ids = E.read_ensembles(str(tmp_path / "e.csv"))[sid]
    np.testing.assert_allclose(members, a.members, atol=5e-7, equal_nan=True)
    np.testing.assert_array_equal(donor_ids, a.donor_ids)
    np.testing.assert_array_equal(dates, a.dates)


def test_parallel_local_fits_match_serial(tables, temp_models):
    gm, bundles = temp_models
    sub = dict(list(tables.items())[:3])
    par = E.fit_all_local(sub, gm, "temperature", workers=2, k=6)
    for sid in sub:
        np.testing.assert_array_equal(par[sid].local["temperature"].coef, bundles[sid].local["temperature"].coef)
        assert par[sid].arma.order == bundles[sid].arma.order


def test_fit_global_needs_two_stations(tables):
    with pytest.raises(E.EngineError):
        E.fit_global(dict(list(tables.items())[:1]), "temperature")
