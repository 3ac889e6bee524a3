import numpy as np
import pytest
from scipy import stats
from statsmodels.tsa.arima_process import arma_acovf

from downscale import gam as G
from downscale import series as S


def _dense_loglik(z, ar, ma):
    """Profile log-likelihood from the dense autocovariance matrix."""
    n = len(z)
    g = arma_acovf(np.r_[1.0, -np.asarray(ar)], np.r_[1.0, np.asarray(ma)], nobs=n)
    idx = np.arange(n)
    full = g[np.abs(idx[:, None] - idx[None, :])]
    ok = np.isfinite(z)
    gam = full[np.ix_(ok, ok)]
    zz = z[ok]
    m = ok.sum()
    sigma2 = zz @ np.linalg.solve(gam, zz) / m
    _, logdet = np.linalg.slogdet(gam)
    return -0.5 * (m * np.log(2 * np.pi * sigma2) + logdet + m), sigma2


@pytest.mark.parametrize("ar,ma", [([0.6], []), ([], [0.4]), ([0.5, -0.3], [0.3]), ([0.2], [-0.5, 0.2])])
def test_kalman_loglik_matches_dense_oracle(ar, ma):
    rng = np.random.default_rng(0)
    z = rng.normal(size=60)
    ll, s2, n = S.arma_loglik(z, ar, ma)
    ll0, s20 = _dense_loglik(z, ar, ma)
    assert n == 60
    assert ll == pytest.approx(ll0, abs=1e-8)
    assert s2 == pytest.approx(s20, rel=1e-10)


def test_kalman_loglik_skips_missing():
    rng = np.random.default_rng(1)
    z = rng.normal(size=50)
    z[[0, 7, 8, 30, 49]] = np.nan
    ll, _, n = S.arma_loglik(z, [0.7], [0.2])
    assert n == 45
    assert ll == pytest.approx(_dense_loglik(z, [0.7], [0.2])[0], abs=1e-8)


def test_model_validation_and_round_trip():
    with pytest.raises(ValueError):
        S.ArmaModel(sigma2=0.0)
    m = S.ArmaModel(ar=[0.5], ma=[0.2, 0.1], sigma2=0.7, loglik=-3.0, nobs=10)
    r = S.ArmaModel.from_dict(m.to_dict())
    assert r.order == (1, 2)
    np.testing.assert_array_equal(r.ar, m.ar)
    np.testing.assert_array_equal(r.ma, m.ma)
    assert r.sigma2 == m.sigma2
    assert not S.ArmaModel(ar=[1.2]).is_causal
    assert not S.ArmaModel(ma=[-1.5]).is_invertible


def test_marginal_variance_ar1():
    assert S.ArmaModel(ar=[0.8], sigma2=1.0).marginal_variance() == pytest.approx(1 / 0.36, rel=1e-10)


def test_simulate_unit_variance_and_acf():
    m = S.ArmaModel(ar=[0.8], sigma2=0.3)
    x = S.simulate_arma(m, 20000, n_series=5, rng=0)
    assert x.shape == (5, 20000)
    assert np.var(x) == pytest.approx(1.0, abs=0.05)
    r1 = np.mean([np.corrcoef(s[:-1], s[1:])[0, 1] for s in x])
    assert r1 == pytest.approx(0.8, abs=0.02)


def test_simulate_seeding():
    m = S.ArmaModel(ar=[0.3], ma=[0.4])
    a = S.simulate_arma(m, 100, 2, rng=7)
    np.testing.assert_array_equal(a, S.simulate_arma(m, 100, 2, rng=7))
    gens = [np.random.default_rng(i) for i in range(3)]
    b = S.simulate_arma(m, 100, 3, rng=gens)
    one = S.simulate_arma(m, 100, 1, rng=[np.random.default_rng(1)])
    np.testing.assert_array_equal(b[1], one[0])
    with pytest.raises(ValueError):
        S.simulate_arma(m, 10, 2, rng=[np.random.default_rng(0)])


def test_fit_arma_auto_recovers_ar1():
    x = S.simulate_arma(S.ArmaModel(ar=[0.8]), 10_000, rng=3)[0]
    m = S.fit_arma_auto(x)
    assert m.order == (1, 0)
    assert abs(m.ar[0] - 0.8) < 0.05


def test_fit_arma_auto_with_gaps_and_short_input():
    x = S.simulate_arma(S.ArmaModel(ma=[0.5]), 5000, rng=4)[0]
    x[::7] = np.nan
    m = S.fit_arma_auto(x, max_p=2, max_q=2)
    assert m.order == (0, 1) and abs(m.ma[0] - 0.5) < 0.06
    with pytest.raises(ValueError):
        S.fit_arma_auto(np.zeros(50))
    with pytest.raises(ValueError):
        S.fit_arma_auto(x, criterion="aic")


def _chain(kind, y):
    return G.GamChain(G.fit_gam({"x": np.zeros(len(y))}, kind, [], y=y))


def test_pit_round_trip_gaussian():
    rng = np.random.default_rng(5)
    y = rng.normal(3.0, 2.0, 2000)
    chain = _chain("gaussian", y)
    rows = {"x": np.zeros(2000)}
    pit = S.pit_transform(y, chain, rows)
    np.testing.assert_allclose(S.gaussianize_inverse(pit.z, chain, rows), y, atol=1e-9)
    assert stats.kstest(pit.z, "norm").pvalue > 0.01


def test_pit_gamma_dry_days_missing_and_cap():
    rng = np.random.default_rng(6)
    y = rng.gamma(2.0, 1.5, 1000)
    y[:100] = 0.0
    y[100] = np.nan
    chain = _chain("gamma", np.where(np.isfinite(y) & (y > 0), y, np.nan))
    rows = {"x": np.zeros(1000)}
    pit = S.pit_transform(y, chain, rows)
    assert np.isnan(pit.z[:101]).all() and pit.n_obs == 899
    huge = S.pit_transform(np.array([1e6]), chain, {"x": np.zeros(1)})
    assert huge.z[0] == pytest.approx(S.Z_CAP)
    assert S.gaussianize_inverse(np.array([50.0]), chain, {"x": np.zeros(1)})[0] < 1e6


def test_pit_misaligned_rows():
    chain = _chain("gaussian", np.arange(10.0))
    with pytest.raises(ValueError):
        S.pit_transform(np.arange(5.0), chain, {"x": np.zeros(4)})


def test_pit_series_rejects_uncapped():
    with pytest.raises(ValueError):
        S.PitSeries(np.arange(1), np.array([S.Z_CAP + 1.0]))
