"""Penalised GAMs for the gaussian, gamma and Bernoulli families.

Coefficients are estimated by penalised iteratively re-weighted least
squares (PIRLS); smoothing parameters are chosen by GCV on the working
linear model ("performance iteration").  Once the smoothing parameters have
settled, a final PIRLS pass at fixed smoothing parameters runs to
convergence with step halving, so the penalised deviance is monotone.

The gamma family is parameterised by its mean ``mu = exp(eta)`` and a scale
``theta`` with ``Var(y) = mu * theta``, i.e. shape ``mu / theta`` and scale
``theta``.  Its mean model uses the matching variance function ``V(mu) = mu``.

Reductions (cross products, QR) are done by LAPACK on the full design in
row order, so a fit is deterministic for fixed inputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, special

from .splines import BasisSpec, Term

logger = logging.getLogger(__name__)

LINKS = {"gaussian": "identity", "gamma": "log", "bernoulli": "logit"}
_ETA_CAP = 30.0


class GamError(RuntimeError):
    pass


class ConvergenceError(GamError):
    def __init__(self, msg, trace):
        super().__init__(f"{msg}; last deviances: {trace[-5:]}")
        self.trace = trace


class RankDeficiencyError(GamError):
    pass


@dataclass
class Family:
    kind: str
    link: str | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in LINKS:
            raise ValueError(f"unknown family {self.kind!r}")
        if self.link is None:
            self.link = LINKS[self.kind]
        if self.link != LINKS[self.kind]:
            raise ValueError(f"family {self.kind} does not support link {self.link}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def continuous(self):
        return self.kind != "bernoulli"

    def validate(self, y):
        if self.kind == "gamma" and np.any(y <= 0):
            raise ValueError("gamma responses must be strictly positive")
        if self.kind == "bernoulli" and np.any((y != 0) & (y != 1)):
            raise ValueError("bernoulli responses must be 0 or 1")

    def linkinv(self, eta):
        if self.kind == "gaussian":
            return eta
        if self.kind == "gamma":
            return np.exp(np.minimum(eta, 700.0))
        return special.expit(eta)

    def linkfun(self, mu):
        if self.kind == "gaussian":
            return mu
        if self.kind == "gamma":
            return np.log(mu)
        return special.logit(mu)

    def working(self, y, eta):
        """IRLS weights and working response for the current predictor."""
        if self.kind == "gaussian":
            return np.ones_like(eta), y.copy()
        if self.kind == "gamma":
            mu = self.linkinv(eta)
            return mu, eta + (y - mu) / mu
        eta = np.clip(eta, -_ETA_CAP, _ETA_CAP)
        mu = special.expit(eta)
        w = mu * (1 - mu)
        return w, eta + (y - mu) / w

    def deviance(self, y, eta):
        mu = self.linkinv(eta)
        if self.kind == "gaussian":
            return float(np.sum((y - mu) ** 2))
        if self.kind == "gamma":
            return float(2 * np.sum(special.xlogy(y, y / mu) - (y - mu)))
        mu = special.expit(np.clip(eta, -_ETA_CAP, _ETA_CAP))
        return float(-2 * np.sum(special.xlogy(y, mu) + special.xlog1py(1 - y, -mu)))

    def init_eta(self, y):
        if self.kind == "gaussian":
            return y.copy()
        if self.kind == "gamma":
            return np.log(y)
        return special.logit((y + 0.5) / 2)

    # conditional distribution -------------------------------------------

    def _shape(self, mu):
        return mu / self.scale

    def cdf(self, y, mu):
        if self.kind == "gaussian":
            return special.ndtr((y - mu) / self.scale)
        if self.kind == "gamma":
            return special.gammainc(self._shape(mu), np.maximum(y, 0) / self.scale)
        raise ValueError("conditional cdf is only defined for continuous families")

    def sf(self, y, mu):
        if self.kind == "gaussian":
            return special.ndtr((mu - y) / self.scale)
        if self.kind == "gamma":
            return special.gammaincc(self._shape(mu), np.maximum(y, 0) / self.scale)
        raise ValueError("conditional cdf is only defined for continuous families")

    def quantile(self, p, mu):
        p = np.asarray(p, dtype=float)
        if np.any((p <= 0) | (p >= 1)):
            raise ValueError("probabilities must lie in (0, 1)")
        if self.kind == "gaussian":
            return mu + self.scale * special.ndtri(p)
        if self.kind == "gamma":
            a = self._shape(mu)
            upper = p > 0.5
            x = np.where(upper, special.gammainccinv(a, 1 - p), special.gammaincinv(a, p))
            x = _polish_gamma(x, a, p)
            return np.maximum(x * self.scale, np.finfo(float).tiny)
        raise ValueError("conditional quantile is only defined for continuous families")

    def sample(self, mu, rng):
        if self.kind == "gaussian":
            return rng.normal(mu, self.scale)
        if self.kind == "gamma":
            return rng.gamma(self._shape(mu), self.scale)
        return (rng.random(np.shape(mu)) < mu).astype(float)

    def to_dict(self):
        return {"kind": self.kind, "link": self.link, "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], link=d["link"], scale=float(d["scale"]))


def _polish_gamma(x, a, p, steps=2):
    """Newton steps on P(a, x) = p; the inverse routines stop a few ulps short."""
    x = np.array(x, dtype=float, copy=True)
    for _ in range(steps):
        ok = (x > 0) & np.isfinite(x)
        if not ok.any():
            break
        xa = x[ok]
        aa = np.broadcast_to(a, x.shape)[ok]
        pa = np.broadcast_to(p, x.shape)[ok]
        lower = pa <= 0.5
        resid = np.where(lower, special.gammainc(aa, xa) - pa, (1 - pa) - special.gammaincc(aa, xa))
        logpdf = (aa - 1) * np.log(xa) - xa - special.gammaln(aa)
        pdf = np.exp(logpdf)
        step = np.where(pdf > 0, resid / np.where(pdf > 0, pdf, 1), 0.0)
        new = xa - step
        x[ok] = np.where((new > 0) & np.isfinite(new), new, xa)
    return x


# ---------------------------------------------------------------------------


@dataclass
class FittedGam:
    family: Family
    specs: list
    coef: np.ndarray
    lambdas: np.ndarray
    intercept: bool = True
    offset_source: str | None = None
    name: str = ""
    response: str | None = None
    n: int = 0
    deviance: float = float("nan")
    edf: float = float("nan")
    edf_blocks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gcv: float = float("nan")
    deviance_trace: list = field(default_factory=list)
    fitted_eta: np.ndarray | None = None

    @property
    def slices(self):
        out, start = [], int(self.intercept)
        for s in self.specs:
            out.append(slice(start, start + s.n_coef))
            start += s.n_coef
        return out

    @property
    def n_coef(self):
        return int(self.intercept) + sum(s.n_coef for s in self.specs)

    def design(self, rows):
        return _design(self.specs, rows, self.intercept)

    def fixed_offset(self, rows):
        return _fixed_offset(self.specs, rows, _nrows(rows))

    def predict_eta(self, rows, offset=None):
        """Linear predictor: offset + fixed unit offsets + X beta."""
        eta = self.design(rows) @ self.coef + self.fixed_offset(rows)
        if offset is not None:
            eta = eta + np.asarray(offset, dtype=float)
        return eta

    def predict_mean(self, rows, offset=None):
        return self.family.linkinv(self.predict_eta(rows, offset))

    def block_effect(self, j, rows):
        """Contribution of block ``j`` (including any fixed unit offset)."""
        s = self.specs[j]
        eff = s.evaluate(rows) @ self.coef[self.slices[j]]
        off = s.offset(rows)
        return eff if off is None else eff + off

    def coefficient(self, covariate):
        """Coefficient of a ``linear`` block."""
        for s, sl in zip(self.specs, self.slices):
            if s.kind == "linear" and s.covariates == (covariate,):
                return float(self.coef[sl][0])
        raise KeyError(covariate)

    def to_dict(self):
        return {
            "name": self.name,
            "response": self.response,
            "family": self.family.to_dict(),
            "intercept": self.intercept,
            "offset_source": self.offset_source,
            "blocks": [s.to_dict() for s in self.specs],
            "coef": self.coef.tolist(),
            "lambdas": np.asarray(self.lambdas).tolist(),
            "summary": {
                "n": self.n,
                "deviance": self.deviance,
                "edf": self.edf,
                "edf_blocks": np.asarray(self.edf_blocks).tolist(),
                "gcv": self.gcv,
            },
        }

    @classmethod
    def from_dict(cls, d):
        s = d.get("summary", {})
        return cls(
            family=Family.from_dict(d["family"]),
            specs=[BasisSpec.from_dict(b) for b in d["blocks"]],
            coef=np.asarray(d["coef"], dtype=float),
            lambdas=np.asarray(d["lambdas"], dtype=float),
            intercept=bool(d.get("intercept", True)),
            offset_source=d.get("offset_source"),
            name=d.get("name", ""),
            response=d.get("response"),
            n=int(s.get("n", 0)),
            deviance=float(s.get("deviance", float("nan"))),
            edf=float(s.get("edf", float("nan"))),
            edf_blocks=np.asarray(s.get("edf_blocks", []), dtype=float),
            gcv=float(s.get("gcv", float("nan"))),
        )


def _nrows(rows):
    if hasattr(rows, "shape"):
        return rows.shape[0]
    return len(next(iter(rows.values())))


def _design(specs, rows, intercept):
    n = _nrows(rows)
    cols = [np.ones((n, 1))] if intercept else []
    cols += [s.evaluate(rows) for s in specs]
    if not cols:
        return np.zeros((n, 0))
    return np.hstack(cols)


def _fixed_offset(specs, rows, n):
    off = np.zeros(n)
    for s in specs:
        o = s.offset(rows)
        if o is not None:
            off += o
    return off


# ---------------------------------------------------------------------------
# Smoothing parameter selection


class _WorkingModel:
    """QR-reduced weighted least squares problem for GCV evaluation."""

    def __init__(self, X, w, z, penalties, n):
        sw = np.sqrt(w)
        Xa = np.column_stack([X * sw[:, None], z * sw])
        R = linalg.qr(Xa, mode="r", overwrite_a=True, check_finite=False)[0]
        p = X.shape[1]
        self.R = R[:p, :p]
        self.f = R[:p, p]
        self.r2 = float(R[p, p] ** 2) if R.shape[0] > p else 0.0
        self.RtR = self.R.T @ self.R
        self.Rtf = self.R.T @ self.f
        self.penalties = penalties
        self.n = n

    def penalty(self, lam):
        S = np.zeros_like(self.RtR)
        for l, (sl, P) in zip(lam, self.penalties):
            S[sl, sl] += l * P
        return S

    def solve(self, lam):
        S = self.penalty(lam)
        A = self.RtR + S
        cf = linalg.cho_factor(A, lower=True, check_finite=False)
        beta = linalg.cho_solve(cf, self.Rtf, check_finite=False)
        resid = self.f - self.R @ beta
        rss = float(resid @ resid) + self.r2
        LiRt = linalg.solve_triangular(cf[0], self.R.T, lower=True, check_finite=False)
        # influence diagonal in coefficient space: diag(A^-1 R'R)
        Ainv_RtR = linalg.cho_solve(cf, self.RtR, check_finite=False)
        edf = float(np.sum(LiRt * LiRt))
        return beta, rss, edf, np.diag(Ainv_RtR), S

    def gcv(self, lam):
        try:
            _, rss, edf, _, _ = self.solve(lam)
        except linalg.LinAlgError:
            return np.inf
        denom = self.n - edf
        if denom <= 0:
            return np.inf
        return self.n * rss / denom**2


def _select_lambdas(wm, lam0, grid):
    """Coordinate-wise grid search on log(lambda) followed by one bounded
    1-d refinement pass per penalty."""
    lam = np.array(lam0, dtype=float)
    log_grid = np.log(grid)
    for j in range(len(lam)):
        scores = []
        for g in grid:
            lam[j] = g
            scores.append(wm.gcv(lam))
        lam[j] = grid[int(np.argmin(scores))]
    for j in range(len(lam)):
        i = int(np.argmin(np.abs(log_grid - np.log(lam[j]))))
        lo, hi = log_grid[max(i - 1, 0)], log_grid[min(i + 1, len(grid) - 1)]
        base = wm.gcv(lam)

        def obj(t, j=j):
            trial = lam.copy()
            trial[j] = np.exp(t)
            return wm.gcv(trial)

        res = optimize.minimize_scalar(obj, bounds=(lo, hi), method="bounded", options={"xatol": 1e-3})
        if res.fun < base:
            lam[j] = np.exp(res.x)
    return lam


# ---------------------------------------------------------------------------


def _subset(rows, mask):
    if hasattr(rows, "iloc"):
        return rows.loc[mask] if mask.dtype == bool else rows.iloc[mask]
    return {k: np.asarray(v)[mask] for k, v in rows.items()}


def fit_gam(
    rows,
    family,
    terms,
    response=None,
    y=None,
    offset=None,
    intercept=True,
    lambdas=None,
    grid=None,
    tol=1e-8,
    max_iter=200,
    max_outer=30,
    name="",
    offset_source=None,
):
    """Fit a penalised GAM.

    Parameters
    ----------
    rows : DataFrame or mapping of arrays
        Covariates (and the response when ``response`` is given).
    family : Family or str
    terms : list of Term or BasisSpec
        Terms are built on the training rows; ready specs are used as given.
    response : str, optional
        Column holding the response.  Alternatively pass ``y``.
    offset : array_like, optional
        Per-row fixed offset on the link scale (e.g. a global predictor).
    lambdas : array_like, optional
        Fixed smoothing parameters (raw penalty scale); skips GCV.
    grid : array_like, optional
        Normalised smoothing grid, default 25 points on [1e-6, 1e6].

    Rows with a missing response, covariate or offset are ignored.
    """
    if isinstance(family, str):
        family = Family(family)
    y_all = np.asarray(rows[response] if y is None else y, dtype=float)
    off_all = None if offset is None else np.asarray(offset, dtype=float)

    names = {c for t in terms for c in t.covariates}
    ok = np.isfinite(y_all)
    for c in names:
        ok &= np.isfinite(np.asarray(rows[c], dtype=float))
    if off_all is not None:
        ok &= np.isfinite(off_all)
    if not ok.any():
        raise GamError("no complete rows to fit")
    data = _subset(rows, ok)
    yv = y_all[ok]
    family.validate(yv)

    specs = [t.build(data).spec if isinstance(t, Term) else t for t in terms]
    X = _design(specs, data, intercept)
    n, p = X.shape
    if n < p:
        raise GamError(f"{n} complete rows for {p} coefficients")
    fixed_off = _fixed_offset(specs, data, n)
    if off_all is not None:
        fixed_off = fixed_off + off_all[ok]

    # embed penalties, normalised so that the grid is comparable across blocks
    penalties, norms = [], []
    start = int(intercept)
    for s in specs:
        sl = slice(start, start + s.n_coef)
        start += s.n_coef
        if not s.penalized:
            continue
        Xb = X[:, sl]
        nrm = np.linalg.norm(Xb.T @ Xb) / max(np.linalg.norm(s.penalty), 1e-300)
        penalties.append((sl, s.penalty * nrm))
        norms.append(nrm)
    norms = np.asarray(norms)
    if grid is None:
        grid = np.logspace(-6, 6, 25)
    fixed = lambdas is not None
    lam = (np.asarray(lambdas, dtype=float) / norms) if fixed else np.ones(len(penalties))
    if fixed and len(lam) != len(penalties):
        raise ValueError(f"expected {len(penalties)} smoothing parameters")

    def pdev(beta, S):
        eta = X @ beta + fixed_off
        return family.deviance(yv, eta) + float(beta @ S @ beta)

    # --- performance iteration: smoothing parameters on the working model
    eta = family.init_eta(yv)
    beta = None
    prev_dev = np.inf
    n_outer = 1 if family.kind == "gaussian" else max_outer
    for _ in range(n_outer):
        w, z = family.working(yv, eta)
        wm = _WorkingModel(X, w, z - fixed_off, penalties, n)
        if penalties and not fixed:
            lam = _select_lambdas(wm, lam, grid)
        try:
            beta, _, _, _, S = wm.solve(lam)
        except linalg.LinAlgError:
            raise RankDeficiencyError("penalised normal equations are singular") from None
        eta = X @ beta + fixed_off
        dev = family.deviance(yv, eta)
        if abs(prev_dev - dev) <= 1e-6 * (abs(dev) + 0.1):
            break
        prev_dev = dev

    # --- fixed-lambda PIRLS with step halving
    S = wm.penalty(lam)
    trace = [pdev(beta, S)]
    if family.kind != "gaussian":
        converged = False
        for _ in range(max_iter):
            w, z = family.working(yv, X @ beta + fixed_off)
            wm = _WorkingModel(X, w, z - fixed_off, penalties, n)
            try:
                new, _, _, _, _ = wm.solve(lam)
            except linalg.LinAlgError:
                raise RankDeficiencyError("penalised normal equations are singular") from None
            val = pdev(new, S)
            step = 1.0
            while val > trace[-1] + 1e-10 * abs(trace[-1]) and step > 1e-6:
                step /= 2
                cand = beta + step * (new - beta)
                val = pdev(cand, S)
                new = cand
            if val > trace[-1]:
                # no descent possible: already at the optimum to machine precision
                converged = True
                break
            beta = new
            trace.append(val)
            if abs(trace[-2] - val) <= tol * (abs(val) + 0.1):
                converged = True
                break
        if not converged:
            raise ConvergenceError("PIRLS did not converge", trace)

    w, z = family.working(yv, X @ beta + fixed_off)
    wm = _WorkingModel(X, w, z - fixed_off, penalties, n)
    _, rss, edf, edf_diag, _ = wm.solve(lam)
    eta = X @ beta + fixed_off
    mu = family.linkinv(eta)
    dev = family.deviance(yv, eta)
    if family.kind == "gaussian":
        scale = float(np.sqrt(np.sum((yv - mu) ** 2) / max(n - edf, 1e-12)))
    elif family.kind == "gamma":
        scale = float(np.sum((yv - mu) ** 2 / mu) / max(n - edf, 1e-12))
    else:
        scale = 1.0
    edf_blocks = np.array([edf_diag[sl].sum() for sl in _slices(specs, intercept)])

    fitted = np.full(len(y_all), np.nan)
    fitted[ok] = eta
    return FittedGam(
        family=Family(family.kind, family.link, scale),
        specs=specs,
        coef=beta,
        lambdas=lam * norms if len(norms) else np.zeros(0),
        intercept=intercept,
        offset_source=offset_source,
        name=name,
        response=response,
        n=n,
        deviance=dev,
        edf=edf,
        edf_blocks=edf_blocks,
        gcv=wm.gcv(lam),
        deviance_trace=trace,
        fitted_eta=fitted,
    )


def _slices(specs, intercept):
    out, start = [], int(intercept)
    for s in specs:
        out.append(slice(start, start + s.n_coef))
        start += s.n_coef
    return out


# ---------------------------------------------------------------------------
# Conditional distribution queries


def predict_eta(model, rows, offset=None):
    return model.predict_eta(rows, offset)


def conditional_cdf(model, rows, y, offset=None):
    """P(Y <= y | rows) under ``model`` (continuous families only)."""
    if not model.family.continuous:
        raise ValueError("conditional_cdf is not defined for the bernoulli family")
    mu = model.predict_mean(rows, offset)
    return model.family.cdf(np.asarray(y, dtype=float), mu)


def conditional_quantile(model, rows, p, offset=None):
    if not model.family.continuous:
        raise ValueError("conditional_quantile is not defined for the bernoulli family")
    mu = model.predict_mean(rows, offset)
    return model.family.quantile(p, mu)


def sample_occurrence(model, rows, rng, offset=None):
    """Independent 0/1 draws with P(1) = logistic(eta) per row."""
    if model.family.kind != "bernoulli":
        raise ValueError("occurrence sampling needs a bernoulli model")
    rng = np.random.default_rng(rng)
    prob = special.expit(model.predict_eta(rows, offset))
    return (rng.random(len(prob)) < prob).astype(np.int8)


@dataclass
class GamChain:
    """A global model optionally refined by a local model fitted on top of
    the global predictor (used as a fixed offset)."""

    global_model: FittedGam
    local_model: FittedGam | None = None

    @property
    def family(self):
        return (self.local_model or self.global_model).family

    def eta(self, rows):
        eta = self.global_model.predict_eta(rows)
        if self.local_model is not None:
            eta = self.local_model.predict_eta(rows, offset=eta)
        return eta

    def mean(self, rows):
        return self.family.linkinv(self.eta(rows))

    def cdf(self, rows, y):
        return self.family.cdf(np.asarray(y, dtype=float), self.mean(rows))

    def sf(self, rows, y):
        return self.family.sf(np.asarray(y, dtype=float), self.mean(rows))

    def quantile(self, rows, p):
        return self.family.quantile(p, self.mean(rows))
