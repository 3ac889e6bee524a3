"""Temporal model: PIT standardisation and ARMA fitting/simulation.

Residual dependence left over by the GAMs is captured by an ARMA(p, q)
process on the probit scale.  Exact Gaussian likelihoods are evaluated with
a Kalman filter so that missing days (including dry days of a precipitation
series) simply drop out of the likelihood instead of being concatenated.

Sign convention::

    z_t = phi_1 z_{t-1} + ... + phi_p z_{t-p} + e_t + psi_1 e_{t-1} + ... + psi_q e_{t-q}
"""
from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import optimize, signal, special

logger = logging.getLogger(__name__)

#: |z| cap for the probit transform, ndtri(1 - 1e-12)
Z_CAP = float(-special.ndtri(1e-12))
_P_EPS = 1e-12


@dataclass
class PitSeries:
    dates: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        ok = np.isfinite(self.z)
        if np.any(np.abs(self.z[ok]) > Z_CAP + 1e-12):
            raise ValueError("PIT values exceed the probit cap")

    @property
    def n_obs(self):
        return int(np.isfinite(self.z).sum())


@dataclass
class ArmaModel:
    """Fitted zero-mean ARMA(p, q) model."""

    ar: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma2: float = 1.0
    loglik: float = float("nan")
    aicc: float = float("nan")
    bic: float = float("nan")
    nobs: int = 0

    def __post_init__(self):
        self.ar = np.atleast_1d(np.asarray(self.ar, dtype=float))
        self.ma = np.atleast_1d(np.asarray(self.ma, dtype=float))
        if not self.sigma2 > 0:
            raise ValueError("innovation variance must be positive")

    @property
    def order(self):
        return len(self.ar), len(self.ma)

    @property
    def is_causal(self):
        return _roots_outside(np.r_[1.0, -self.ar])

    @property
    def is_invertible(self):
        return _roots_outside(np.r_[1.0, self.ma])

    def marginal_variance(self):
        """Stationary variance of the process."""
        return self.sigma2 * float(np.sum(_psi_weights(self.ar, self.ma) ** 2))

    def to_dict(self):
        p, q = self.order
        return {
            "p": p,
            "q": q,
            "ar": self.ar.tolist(),
            "ma": self.ma.tolist(),
            "sigma2": self.sigma2,
            "loglik": self.loglik,
            "aicc": self.aicc,
            "bic": self.bic,
            "nobs": self.nobs,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            ar=np.asarray(d["ar"], dtype=float),
            ma=np.asarray(d["ma"], dtype=float),
            sigma2=float(d["sigma2"]),
            loglik=float(d.get("loglik", float("nan"))),
            aicc=float(d.get("aicc", float("nan"))),
            bic=float(d.get("bic", float("nan"))),
            nobs=int(d.get("nobs", 0)),
        )


def _roots_outside(poly, margin=1e-8):
    poly = np.trim_zeros(np.asarray(poly, dtype=float), "b")
    if len(poly) <= 1:
        return True
    # np.roots wants the highest power first
    roots = np.roots(poly[::-1])
    return bool(np.all(np.abs(roots) > 1.0 + margin))


def _psi_weights(ar, ma, tol=1e-14, max_lag=100_000):
    """MA(infinity) weights of a causal ARMA process."""
    p = len(ar)
    psi = [1.0]
    for j in range(1, max_lag):
        v = ma[j - 1] if j <= len(ma) else 0.0
        for i in range(1, min(j, p) + 1):
            v += ar[i - 1] * psi[j - i]
        psi.append(v)
        if j > len(ma) and j > p and all(abs(w) < tol for w in psi[-max(p, 1):]):
            break
    return np.asarray(psi)


# ---------------------------------------------------------------------------
# Parameter transforms


def _pacf_to_poly(r):
    """Map partial autocorrelations in (-1, 1) to the coefficients of a
    polynomial with all roots outside the unit circle (Durbin-Levinson)."""
    k = len(r)
    a = np.zeros(k)
    for m in range(k):
        prev = a[:m].copy()
        a[m] = r[m]
        a[:m] = prev - r[m] * prev[::-1]
    return a


def _unconstrain(params_u, p, q):
    r = np.tanh(params_u)
    ar = _pacf_to_poly(r[:p])
    ma = -_pacf_to_poly(r[p:p + q])
    return ar, ma


# ---------------------------------------------------------------------------
# Exact likelihood


def _state_space(ar, ma):
    p, q = len(ar), len(ma)
    r = max(p, q + 1)
    T = np.zeros((r, r))
    T[:p, 0] = ar
    T[: r - 1, 1:] += np.eye(r - 1)
    R = np.zeros(r)
    R[0] = 1.0
    R[1:q + 1] = ma
    RR = np.outer(R, R)
    # stationary state covariance: vec(P) = (I - T kron T)^-1 vec(RR')
    P0 = np.linalg.solve(np.eye(r * r) - np.kron(T, T), RR.ravel()).reshape(r, r)
    return T, RR, 0.5 * (P0 + P0.T)


@numba.njit(cache=True)
def _kalman_loglik_terms(y, phi, RR, P0):
    """Return (sum v^2/F, sum log F, n) for unit innovation variance.

    ``phi`` is the first column of the companion transition matrix (AR
    coefficients padded to the state dimension).  Once the covariance has
    converged the filter runs with a frozen gain until the next gap.
    """
    r = phi.shape[0]
    a = np.zeros(r)
    an = np.zeros(r)
    K = np.zeros(r)
    P = P0.copy()
    M = np.zeros((r, r))
    Pn = np.zeros((r, r))
    ssq = 0.0
    sumlog = 0.0
    n = 0
    steady = False
    F = 1.0
    for t in range(y.shape[0]):
        yt = y[t]
        missing = np.isnan(yt)
        if missing:
            steady = False
        else:
            if not steady:
                F = P[0, 0]
                for i in range(r):
                    K[i] = P[i, 0] / F
            v = yt - a[0]
            ssq += v * v / F
            sumlog += np.log(F)
            n += 1
            for i in range(r):
                a[i] += K[i] * v
        # a <- T a
        for i in range(r):
            an[i] = phi[i] * a[0] + (a[i + 1] if i + 1 < r else 0.0)
        for i in range(r):
            a[i] = an[i]
        if steady:
            continue
        # P <- T (P - K P[0, :]) T' + RR
        if not missing:
            for i in range(r):
                for j in range(r):
                    Pn[i, j] = P[i, j] - K[i] * P[0, j]
        else:
            for i in range(r):
                for j in range(r):
                    Pn[i, j] = P[i, j]
        for i in range(r):
            for j in range(r):
                M[i, j] = phi[i] * Pn[0, j] + (Pn[i + 1, j] if i + 1 < r else 0.0)
        delta = 0.0
        for i in range(r):
            for j in range(r):
                val = M[i, 0] * phi[j] + (M[i, j + 1] if j + 1 < r else 0.0) + RR[i, j]
                d = abs(val - P[i, j])
                if d > delta:
                    delta = d
                P[i, j] = val
        if not missing and delta < 1e-12:
            steady = True
            F = P[0, 0]
            for i in range(r):
                K[i] = P[i, 0] / F
    return ssq, sumlog, n


def arma_loglik(z, ar, ma):
    """Exact Gaussian log-likelihood with sigma^2 profiled out.

    Returns ``(loglik, sigma2_hat, n)``.  NaN entries of ``z`` are skipped.
    """
    z = np.ascontiguousarray(z, dtype=float)
    ar = np.asarray(ar, dtype=float)
    ma = np.asarray(ma, dtype=float)
    T, RR, P0 = _state_space(ar, ma)
    ssq, sumlog, n = _kalman_loglik_terms(z, np.ascontiguousarray(T[:, 0]), RR, P0)
    sigma2 = ssq / n
    ll = -0.5 * (n * np.log(2 * np.pi * sigma2) + sumlog + n)
    return ll, sigma2, n


def _fit_order(z, p, q, n_valid, x0=None):
    """ML fit of one order; returns (ar, ma, sigma2, loglik, u) with ``u`` the
    unconstrained (atanh partial autocorrelation) parameters."""
    if p == 0 and q == 0:
        ok = np.isfinite(z)
        sigma2 = float(np.mean(z[ok] ** 2))
        ll = -0.5 * n_valid * (np.log(2 * np.pi * sigma2) + 1)
        return np.zeros(0), np.zeros(0), sigma2, ll, np.zeros(0)

    def nll(u):
        ar, ma = _unconstrain(u, p, q)
        ll, _, _ = arma_loglik(z, ar, ma)
        return -ll / n_valid

    if x0 is None:
        x0 = np.zeros(p + q)
    res = optimize.minimize(nll, x0, method="L-BFGS-B", bounds=[(-7.0, 7.0)] * (p + q))
    ar, ma = _unconstrain(res.x, p, q)
    ll, sigma2, _ = arma_loglik(z, ar, ma)
    return ar, ma, sigma2, ll, res.x


def _information_criteria(ll, k, n):
    aic = -2 * ll + 2 * k
    aicc = aic + 2 * k * (k + 1) / (n - k - 1) if n - k - 1 > 0 else np.inf
    bic = -2 * ll + k * np.log(n)
    return aicc, bic


def fit_arma(z, p, q, _x0=None):
    """Fit a single ARMA(p, q) by exact maximum likelihood."""
    z = np.asarray(getattr(z, "z", z), dtype=float)
    n = int(np.isfinite(z).sum())
    ar, ma, sigma2, ll, u = _fit_order(z, p, q, n, _x0)
    aicc, bic = _information_criteria(ll, p + q + 1, n)
    model = ArmaModel(ar=ar, ma=ma, sigma2=sigma2, loglik=ll, aicc=aicc, bic=bic, nobs=n)
    model._u = u
    return model


def _pad(u, p_old, p, q_old, q):
    """Embed a smaller order's parameters; a zero partial autocorrelation
    leaves the polynomial unchanged, so the start reproduces the nested fit."""
    out = np.zeros(p + q)
    out[:p_old] = u[:p_old]
    out[p:p + q_old] = u[p_old:p_old + q_old]
    return out


def fit_arma_auto(z, max_p=3, max_q=3, criterion="bic", min_obs=100):
    """Exhaustive order search over ``[0, max_p] x [0, max_q]``.

    Every candidate is fit by exact Gaussian ML, started from the better of
    its two nested neighbours (p-1, q) and (p, q-1).  Candidates whose
    estimates end up on the causality/invertibility boundary are discarded.
    The winner minimises ``criterion`` (``"bic"`` or ``"aicc"``).

    Parameters
    ----------
    z : PitSeries or array_like
        Standardised series, NaN for missing days.
    criterion : {"bic", "aicc"}
    min_obs : int
        Minimum number of non-missing values.

    Returns
    -------
    ArmaModel
    """
    if criterion not in ("bic", "aicc"):
        raise ValueError(f"unknown criterion {criterion!r}")
    z = np.asarray(getattr(z, "z", z), dtype=float)
    n = int(np.isfinite(z).sum())
    if n < min_obs:
        raise ValueError(f"need at least {min_obs} non-missing values, got {n}")

    fits = {}
    best, best_score = None, np.inf
    for p, q in itertools.product(range(max_p + 1), range(max_q + 1)):
        starts = [fits[o] for o in ((p - 1, q), (p, q - 1)) if o in fits]
        x0 = None
        if starts:
            parent = max(starts, key=lambda m: m.loglik)
            x0 = _pad(parent._u, *(parent.order[0], p, parent.order[1], q))
        try:
            model = fit_arma(z, p, q, x0)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as err:
            logger.debug("ARMA(%d,%d) failed: %s", p, q, err)
            continue
        if not np.isfinite(model.loglik):
            continue
        fits[(p, q)] = model
        if not (model.is_causal and model.is_invertible):
            continue
        score = model.bic if criterion == "bic" else model.aicc
        if score < best_score:
            best, best_score = model, score
    if best is None:
        warnings.warn("all ARMA candidates failed; using white noise", RuntimeWarning)
        return fit_arma(z, 0, 0)
    return best


# ---------------------------------------------------------------------------
# Simulation


def burn_in_length(model):
    p, q = model.order
    burn = 10 * (p + q + 1)
    if p:
        # stretch the burn-in for slowly decaying AR memory
        rho = 1.0 / np.min(np.abs(np.roots(np.r_[1.0, -model.ar][::-1])))
        if rho > 0:
            burn = max(burn, int(np.ceil(np.log(1e-8) / (2 * np.log(rho)))))
    return burn


def simulate_arma(model, length, n_series=1, rng=None):
    """Simulate stationary series rescaled to unit marginal variance.

    Parameters
    ----------
    model : ArmaModel
    length : int
    n_series : int
    rng : numpy.random.Generator, int, or sequence of Generators
        A sequence gives one independent stream per output series.

    Returns
    -------
    ndarray, shape (n_series, length)
    """
    burn = burn_in_length(model)
    total = burn + length
    if isinstance(rng, (list, tuple)):
        if len(rng) != n_series:
            raise ValueError("need one generator per series")
        eps = np.stack([g.standard_normal(total) for g in rng])
    else:
        eps = np.random.default_rng(rng).standard_normal((n_series, total))
    b = np.r_[1.0, model.ma]
    a = np.r_[1.0, -model.ar]
    x = signal.lfilter(b, a, eps, axis=1)[:, burn:]
    sd = np.sqrt(model.marginal_variance() / model.sigma2)
    return x / sd


# ---------------------------------------------------------------------------
# PIT


def probit(p):
    """Standard normal quantile with the tails capped at +-Z_CAP."""
    return special.ndtri(np.clip(p, _P_EPS, 1 - _P_EPS))


def pit_transform(y, chain, rows, dates=None):
    """z = Phi^-1(F(y)) under the conditional law of ``chain`` at ``rows``.

    For gamma (precipitation intensity) chains only wet days (y > 0) are
    transformed; dry and missing days give NaN.
    """
    y = np.asarray(y, dtype=float)
    if len(y) != _nrows(rows):
        raise ValueError("response and covariate rows are misaligned")
    if dates is not None and "date" in rows and not np.array_equal(
        np.asarray(rows["date"], dtype="datetime64[D]"), np.asarray(dates, dtype="datetime64[D]")
    ):
        raise ValueError("response and covariate dates are misaligned")
    ok = np.isfinite(y)
    if chain.family.kind == "gamma":
        ok &= y > 0
    z = np.full(len(y), np.nan)
    if ok.any():
        sub = _take(rows, ok)
        lo, hi = chain.cdf(sub, y[ok]), chain.sf(sub, y[ok])
        # use the survival function in the upper tail for precision
        zz = np.where(lo < 0.5, probit(lo), -probit(hi))
        z[ok] = np.clip(zz, -Z_CAP, Z_CAP)
    return PitSeries(dates=dates if dates is not None else np.arange(len(y)), z=z)


def gaussianize_inverse(z, chain, rows):
    """Map standard-normal values back to the response scale, day by day.

    ``z`` may be 1-d (one series) or 2-d (members x days).
    """
    z = np.clip(np.asarray(z, dtype=float), -Z_CAP, Z_CAP)
    return chain.quantile(rows, special.ndtr(z))


def _nrows(rows):
    if hasattr(rows, "iloc"):
        return len(rows)
    return len(np.asarray(next(iter(rows.values())))) if rows else 0


def _take(rows, mask):
    if hasattr(rows, "iloc"):
        return rows.loc[np.asarray(mask)] if mask.dtype == bool else rows.iloc[mask]
    return {k: np.asarray(v)[mask] for k, v in rows.items()}
