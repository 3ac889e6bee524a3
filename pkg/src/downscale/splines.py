"""Penalised regression spline bases.

Every constructor returns a :class:`BasisBlock`: the training design columns,
the roughness penalty in the same parameterisation, and a :class:`BasisSpec`
that re-creates the columns for new data.  Smooth blocks are centred on the
training rows so they are identifiable next to a model intercept; the
centring offsets are part of the BasisSpec.

Supported kinds
---------------
``thin_plate_1d``
    Low-rank cubic thin-plate regression spline: radial functions
    ``|x - knot|^3`` at quantile knots plus an unpenalised linear term.
``offset_plus_spline``
    ``x + s(x)``: the covariate enters with a fixed unit coefficient and a
    thin-plate smooth on top.
``cyclic_cubic``
    Cyclic cubic regression spline (knot-value parameterisation).
``sphere_2d``
    Radial spline on the sphere in great-circle distance,
    ``phi(g) = g^2 log g`` with ``phi(0) = 0``.
``linear``
    Plain unpenalised column (e.g. a binary indicator).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMOOTH_KINDS = ("thin_plate_1d", "offset_plus_spline", "cyclic_cubic", "sphere_2d")
KINDS = SMOOTH_KINDS + ("linear",)


@dataclass
class BasisSpec:
    """Everything needed to evaluate a basis block on new rows."""

    kind: str
    covariates: tuple
    k: int
    knots: np.ndarray = field(default_factory=lambda: np.zeros(0))
    period: float | None = None
    shift: float = 0.0
    scale: float = 1.0
    transform: np.ndarray | None = None
    col_means: np.ndarray | None = None
    penalty: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        self.covariates = tuple(self.covariates)
        self.knots = np.asarray(self.knots, dtype=float)
        if self.kind == "cyclic_cubic" and not (self.period is not None and np.isfinite(self.period) and self.period > 0):
            raise ValueError("cyclic basis needs a finite positive period")

    @property
    def name(self):
        return f"{self.kind}({','.join(self.covariates)})"

    @property
    def penalized(self):
        return self.kind in SMOOTH_KINDS

    @property
    def n_coef(self):
        if self.kind == "linear":
            return 1
        return self.penalty.shape[0]

    def _inputs(self, data):
        out = []
        for name in self.covariates:
            try:
                out.append(np.asarray(data[name], dtype=float))
            except KeyError:
                raise KeyError(f"covariate {name!r} missing from input") from None
        return out

    def raw(self, data):
        """Uncentred columns."""
        xs = self._inputs(data)
        if self.kind == "linear":
            return xs[0][:, None]
        if self.kind in ("thin_plate_1d", "offset_plus_spline"):
            u = (xs[0] - self.shift) / self.scale
            return _tp_columns(u, self.knots, self.transform)
        if self.kind == "cyclic_cubic":
            return _cc_columns(xs[0], self.knots, self.period)[:, :-1]
        if self.kind == "sphere_2d":
            # rows repeat a handful of station locations; evaluate each once
            pts, inv = np.unique(np.column_stack(xs), axis=0, return_inverse=True)
            g = great_circle(pts[:, 0], pts[:, 1], self.knots[:, 0], self.knots[:, 1])
            return (radial_sphere(g) @ self.transform)[inv.ravel()]
        raise AssertionError(self.kind)

    def evaluate(self, data):
        """Design columns for ``data`` using the stored knots and centring."""
        X = self.raw(data)
        if self.col_means is not None:
            X = X - self.col_means
        return X

    def offset(self, data):
        """Fixed-coefficient contribution (``x`` for offset_plus_spline, else 0)."""
        if self.kind == "offset_plus_spline":
            return self._inputs(data)[0].copy()
        return None

    def to_dict(self):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "kind": self.kind,
            "covariates": list(self.covariates),
            "k": self.k,
            "knots": arr(self.knots),
            "period": self.period,
            "shift": self.shift,
            "scale": self.scale,
            "transform": arr(self.transform),
            "col_means": arr(self.col_means),
            "penalty": arr(self.penalty),
        }

    @classmethod
    def from_dict(cls, d):
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        return cls(
            kind=d["kind"],
            covariates=tuple(d["covariates"]),
            k=int(d["k"]),
            knots=arr(d["knots"]),
            period=d.get("period"),
            shift=float(d["shift"]),
            scale=float(d["scale"]),
            transform=arr(d.get("transform")),
            col_means=arr(d.get("col_means")),
            penalty=arr(d.get("penalty")),
        )


@dataclass
class BasisBlock:
    spec: BasisSpec
    columns: np.ndarray
    penalty: np.ndarray
    center_constraint: np.ndarray | None = None


def _finish(spec, data):
    raw = spec.raw(data)
    spec.col_means = raw.mean(axis=0)
    cols = raw - spec.col_means
    return BasisBlock(spec=spec, columns=cols, penalty=spec.penalty, center_constraint=raw.sum(axis=0))


def _null_complement(T):
    """Orthonormal basis of the complement of span(T)."""
    Q, _ = np.linalg.qr(T, mode="complete")
    return Q[:, T.shape[1]:]


# ---------------------------------------------------------------------------
# Thin plate (1-d)


def _tp_columns(u, knots, Z):
    R = np.abs(u[:, None] - knots[None, :]) ** 3
    return np.column_stack([R @ Z, u])


def thin_plate_basis(x, k=10, name="x", *, _kind="thin_plate_1d"):
    """Cubic thin-plate regression spline with ``k`` quantile knots.

    The radial coefficients are constrained to be orthogonal to the linear
    polynomials at the knots, which leaves ``k - 2`` penalised directions plus
    one unpenalised linear column (the constant is absorbed by centring).
    """
    x = np.asarray(x, dtype=float)
    if k < 3:
        raise ValueError("thin plate basis needs k >= 3")
    ux = np.unique(x[np.isfinite(x)])
    if len(ux) < k:
        raise ValueError(f"{name}: need at least {k} distinct values, got {len(ux)}")
    shift = float(np.mean(x))
    scale = float(np.std(x)) or 1.0
    knots = (np.quantile(ux, np.linspace(0, 1, k)) - shift) / scale
    T = np.column_stack([np.ones(k), knots])
    Z = _null_complement(T)
    E = np.abs(knots[:, None] - knots[None, :]) ** 3 / 12.0
    S_rad = Z.T @ E @ Z
    S = np.zeros((k - 1, k - 1))
    S[: k - 2, : k - 2] = 0.5 * (S_rad + S_rad.T)
    spec = BasisSpec(
        kind=_kind, covariates=(name,), k=k, knots=knots, shift=shift, scale=scale, transform=Z, penalty=S
    )
    return _finish(spec, {name: x})


def offset_plus_spline(x, k=10, name="x"):
    """``x -> x + s(x)``: unit-coefficient offset plus a thin-plate smooth."""
    return thin_plate_basis(x, k, name, _kind="offset_plus_spline")


# ---------------------------------------------------------------------------
# Cyclic cubic


def _cc_matrices(knots, period):
    k = len(knots)
    h = np.diff(np.r_[knots, knots[0] + period])
    B = np.zeros((k, k))
    D = np.zeros((k, k))
    for i in range(k):
        im, ip = (i - 1) % k, (i + 1) % k
        B[i, i] += (h[im] + h[i]) / 3.0
        B[i, ip] += h[i] / 6.0
        B[i, im] += h[im] / 6.0
        D[i, i] += -1.0 / h[im] - 1.0 / h[i]
        D[i, ip] += 1.0 / h[i]
        D[i, im] += 1.0 / h[im]
    return B, D


def _cc_columns(x, knots, period):
    k = len(knots)
    B, D = _cc_matrices(knots, period)
    F = np.linalg.solve(B, D)  # second derivatives at the knots, per knot value
    t = knots[0] + np.mod(x - knots[0], period)
    ends = np.r_[knots, knots[0] + period]
    j = np.clip(np.searchsorted(ends, t, side="right") - 1, 0, k - 1)
    h = ends[j + 1] - ends[j]
    am = (ends[j + 1] - t) / h
    ap = (t - ends[j]) / h
    cm = ((ends[j + 1] - t) ** 3 / h - h * (ends[j + 1] - t)) / 6.0
    cp = ((t - ends[j]) ** 3 / h - h * (t - ends[j])) / 6.0
    jp = (j + 1) % k
    X = cm[:, None] * F[j] + cp[:, None] * F[jp]
    rows = np.arange(len(t))
    X[rows, j] += am
    X[rows, jp] += ap
    return X


def cyclic_cubic_basis(day, k=10, period=366.0, name="day_of_year"):
    """Cyclic cubic regression spline on ``[1, period + 1)`` with ``k`` knots.

    Parameters are the spline values at the knots; the basis and its first
    two derivatives wrap continuously at ``period``.
    """
    day = np.asarray(day, dtype=float)
    if k < 3:
        raise ValueError("cyclic basis needs k >= 3")
    ok = np.isfinite(day)
    if np.any((day[ok] < 1) | (day[ok] > period + 1)):
        raise ValueError(f"{name}: values outside [1, {period + 1}]")
    knots = 1.0 + np.arange(k) * (period / k)
    B, D = _cc_matrices(knots, period)
    S = D.T @ np.linalg.solve(B, D)
    S = 0.5 * (S + S.T)
    # after centring the columns sum to zero; drop the last to stay identifiable
    spec = BasisSpec(kind="cyclic_cubic", covariates=(name,), k=k, knots=knots, period=float(period),
                     penalty=S[:-1, :-1])
    return _finish(spec, {name: day})


# ---------------------------------------------------------------------------
# Sphere


def _unit_vectors(lon, lat):
    lo, la = np.radians(lon), np.radians(lat)
    return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1)


def great_circle(lon1, lat1, lon2, lat2):
    """Pairwise great-circle angles (radians), shape (len(lon1), len(lon2))."""
    u = _unit_vectors(np.atleast_1d(lon1), np.atleast_1d(lat1))
    v = _unit_vectors(np.atleast_1d(lon2), np.atleast_1d(lat2))
    cross = np.linalg.norm(np.cross(u[:, None, :], v[None, :, :]), axis=-1)
    return np.arctan2(cross, u @ v.T)


def radial_sphere(g):
    g = np.asarray(g, dtype=float)
    out = np.zeros_like(g)
    pos = g > 0
    out[pos] = g[pos] ** 2 * np.log(g[pos])
    return out


def farthest_point_knots(lon, lat, k):
    """Deterministic farthest-point sampling over the distinct locations."""
    pts = np.unique(np.column_stack([lon, lat]), axis=0)
    if len(pts) < k:
        raise ValueError(f"need at least {k} distinct locations, got {len(pts)}")
    chosen = [0]
    dmin = great_circle(pts[:, 0], pts[:, 1], pts[:1, 0], pts[:1, 1])[:, 0]
    for _ in range(k - 1):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        d = great_circle(pts[:, 0], pts[:, 1], pts[nxt:nxt + 1, 0], pts[nxt:nxt + 1, 1])[:, 0]
        dmin = np.minimum(dmin, d)
    return pts[chosen]


def sphere_basis(lon, lat, k=50, names=("lon", "lat")):
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if k < 3:
        raise ValueError("sphere basis needs k >= 3")
    uniq = np.unique(np.column_stack([lon, lat]), axis=0)
    if len(uniq) < 2:
        raise ValueError("sphere basis: all locations identical")
    knots = farthest_point_knots(lon, lat, k)
    Z = _null_complement(np.ones((k, 1)))
    G = radial_sphere(great_circle(knots[:, 0], knots[:, 1], knots[:, 0], knots[:, 1]))
    S = Z.T @ G @ Z
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() < -1e-10 * max(abs(w).max(), 1.0):
        # kernel is only conditionally definite for small caps of the sphere;
        # keep the eigenvectors, penalise by absolute eigenvalue
        S = (V * np.abs(w)) @ V.T
        S = 0.5 * (S + S.T)
    spec = BasisSpec(kind="sphere_2d", covariates=tuple(names), k=k, knots=knots, transform=Z, penalty=S)
    return _finish(spec, {names[0]: lon, names[1]: lat})


def linear_basis(x, name="x"):
    x = np.asarray(x, dtype=float)
    spec = BasisSpec(kind="linear", covariates=(name,), k=1, penalty=np.zeros((1, 1)))
    return BasisBlock(spec=spec, columns=x[:, None], penalty=spec.penalty)


def evaluate_basis(spec, data):
    """Design rows of ``spec`` at new covariate values."""
    return spec.evaluate(data)


# ---------------------------------------------------------------------------
# Term descriptors used by the model formulas


@dataclass(frozen=True)
class Term:
    kind: str
    covariates: tuple
    k: int = 10
    period: float = 366.0

    def build(self, data):
        if self.kind == "linear":
            return linear_basis(data[self.covariates[0]], self.covariates[0])
        if self.kind == "thin_plate_1d":
            return thin_plate_basis(data[self.covariates[0]], self.k, self.covariates[0])
        if self.kind == "offset_plus_spline":
            return offset_plus_spline(data[self.covariates[0]], self.k, self.covariates[0])
        if self.kind == "cyclic_cubic":
            return cyclic_cubic_basis(data[self.covariates[0]], self.k, self.period, self.covariates[0])
        if self.kind == "sphere_2d":
            return sphere_basis(data[self.covariates[0]], data[self.covariates[1]], self.k, self.covariates)
        raise ValueError(f"unknown basis kind {self.kind!r}")


def tp(name, k=10):
    return Term("thin_plate_1d", (name,), k)


def tp_offset(name, k=10):
    return Term("offset_plus_spline", (name,), k)


def cc(name, k=10, period=366.0):
    return Term("cyclic_cubic", (name,), k, period)


def sphere(lon="lon", lat="lat", k=50):
    return Term("sphere_2d", (lon, lat), k)


def linear(name):
    return Term("linear", (name,), 1)
