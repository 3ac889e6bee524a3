"""Evaluation criteria, skill scores and hexagonal map aggregation.

All ensemble criteria take an observed series ``obs`` (length T, NaN =
missing) and an ensemble ``members`` of shape (B, T) on the same dates.
Deterministic series are passed as single-member ensembles.  Days with a
missing observation are masked out of the members as well so that both
sides are summarised over the same calendar days.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

CRITERIA = ("RMSE", "MAE", "ZP01", "ZP1", "Q01", "Q95", "Q99", "IQD", "WM", "WS", "MM", "MS", "D1", "D3", "D7")
TEMPERATURE_CRITERIA = ("RMSE", "MAE", "Q01", "Q99", "IQD", "WM", "WS", "MM", "MS", "D1", "D3", "D7")
PRECIPITATION_CRITERIA = ("RMSE", "MAE", "ZP01", "ZP1", "Q95", "Q99", "IQD", "WM", "WS", "MM", "MS", "D1", "D3", "D7")


@dataclass
class ScoreRecord:
    station_id: str
    criterion: str
    model: str
    value: float
    lon: float = float("nan")
    lat: float = float("nan")


@dataclass
class SkillSummary:
    criterion: str
    competitor: str
    base: str
    skill: float
    ci_low: float
    ci_high: float


# ---------------------------------------------------------------------------
# Integrated quadratic distance


def iqd(sample_a, sample_b):
    """Integrated squared difference between two empirical CDFs.

    Exact for step functions: the CDFs are constant between consecutive
    pooled order statistics, so the integral is a finite sum.  Equals the
    energy form E|X-Y| - E|X-X'|/2 - E|Y-Y'|/2.
    """
    a = np.sort(np.asarray(sample_a, dtype=float).ravel())
    b = np.sort(np.asarray(sample_b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("iqd needs two non-empty samples")
    grid = np.union1d(a, b)
    Fa = np.searchsorted(a, grid, side="right") / a.size
    Fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.sum((Fa[:-1] - Fb[:-1]) ** 2 * np.diff(grid)))


def energy_iqd_bruteforce(sample_a, sample_b):
    """O(n^2) energy-distance form of :func:`iqd` (reference only)."""
    a = np.asarray(sample_a, dtype=float).ravel()
    b = np.asarray(sample_b, dtype=float).ravel()
    xy = np.abs(a[:, None] - b[None, :]).mean()
    xx = np.abs(a[:, None] - a[None, :]).mean()
    yy = np.abs(b[:, None] - b[None, :]).mean()
    return float(xy - 0.5 * xx - 0.5 * yy)


# ---------------------------------------------------------------------------
# Summary statistics


def _as_members(members, T):
    m = np.asarray(members, dtype=float)
    if m.ndim == 1:
        m = m[None, :]
    if m.shape[1] != T:
        raise ValueError(f"ensemble has {m.shape[1]} days, observations {T}")
    return m


def _aligned(obs, members):
    obs = np.asarray(obs, dtype=float)
    m = _as_members(members, len(obs)).copy()
    m[:, ~np.isfinite(obs)] = np.nan
    return obs, m


def _block_layout(dates, block):
    """Block index per day and the full calendar length of each block."""
    dates = np.asarray(dates, dtype="datetime64[D]")
    if block == "week":
        ids = (dates - dates[0]).astype(int) // 7
        lengths = np.full(ids.max() + 1, 7)
        return ids, lengths
    if block == "month":
        months = dates.astype("datetime64[M]")
        ids = (months - months[0]).astype(int)
        start = months[0] + np.arange(ids.max() + 2).astype("timedelta64[M]")
        lengths = np.diff(start.astype("datetime64[D]")).astype(int)
        return ids, lengths
    raise ValueError(f"unknown block {block!r}")


def block_summaries(values, dates, block="week", stat="mean", max_missing=2):
    """Per-block mean or SD of a daily series.

    Weeks are consecutive 7-day blocks from the first date; months are
    calendar months.  Days outside the date range count as missing, so a
    block with more than ``max_missing`` missing days is dropped.  SDs use
    ddof=1 and need at least two values.
    """
    v = np.asarray(values, dtype=float)
    ids, lengths = _block_layout(dates, block)
    ok = np.isfinite(v)
    nb = len(lengths)
    counts = np.bincount(ids[ok], minlength=nb)
    sums = np.bincount(ids[ok], weights=v[ok], minlength=nb)
    keep = lengths - counts <= max_missing
    if stat == "mean":
        keep &= counts >= 1
        return sums[keep] / counts[keep]
    if stat == "sd":
        keep &= counts >= 2
        means = sums / np.maximum(counts, 1)
        ss = np.bincount(ids[ok], weights=(v[ok] - means[ids[ok]]) ** 2, minlength=nb)
        return np.sqrt(ss[keep] / (counts[keep] - 1))
    raise ValueError(f"unknown statistic {stat!r}")


def n_day_differences(values, n):
    v = np.asarray(values, dtype=float)
    d = v[n:] - v[:-n]
    return d[np.isfinite(d)]


SUMMARIES = ("daily-marginal", "weekly-mean", "weekly-sd", "monthly-mean", "monthly-sd")


def summary_values(values, dates, summary, variable="temperature"):
    """Summary statistics of one series; ``summary`` is one of
    :data:`SUMMARIES` or ``"diff-<n>"``."""
    v = np.asarray(values, dtype=float)
    if summary == "daily-marginal":
        out = v[np.isfinite(v)]
        return out[out > 0] if variable == "precipitation" else out
    if summary.startswith("diff-"):
        return n_day_differences(v, int(summary.split("-")[1]))
    block, stat = summary.split("-")
    return block_summaries(v, dates, "week" if block == "weekly" else "month", stat)


def pooled_summary_iqd(obs, members, dates, summary, variable="temperature"):
    """IQD between observed summaries and summaries pooled over all members."""
    obs, m = _aligned(obs, members)
    t_obs = summary_values(obs, dates, summary, variable)
    t_sim = np.concatenate([summary_values(row, dates, summary, variable) for row in m])
    if t_obs.size == 0 or t_sim.size == 0:
        raise ValueError(f"no valid blocks for summary {summary!r}")
    return iqd(t_sim, t_obs)


# ---------------------------------------------------------------------------
# Point criteria


def _lower_median(m):
    """Per-column lower median ignoring NaN."""
    s = np.sort(m, axis=0)  # NaN sort last
    cnt = np.sum(np.isfinite(m), axis=0)
    idx = np.maximum((cnt - 1) // 2, 0)
    return np.take_along_axis(s, idx[None, :], axis=0)[0]


def rmse_mae(obs, members):
    """RMSE against the daily ensemble mean, MAE against the daily lower median."""
    obs, m = _aligned(obs, members)
    ok = np.isfinite(obs) & np.any(np.isfinite(m), axis=0)
    if not ok.any():
        raise ValueError("no overlapping days")
    mean = np.nanmean(m[:, ok], axis=0)
    med = _lower_median(m[:, ok])
    rmse = float(np.sqrt(np.mean((obs[ok] - mean) ** 2)))
    mae = float(np.mean(np.abs(obs[ok] - med)))
    return rmse, mae


def zp(obs, members, threshold):
    """Squared difference of observed and pooled simulated dry-day fractions.

    A day is dry when its value is strictly below ``threshold``.
    """
    obs, m = _aligned(obs, members)
    o = obs[np.isfinite(obs)]
    s = m[np.isfinite(m)]
    if o.size == 0 or s.size == 0:
        raise ValueError("empty series")
    p_y = np.mean(o < threshold)
    p_z = np.mean(s < threshold)
    return float((p_y - p_z) ** 2)


def pinball(q, y, tau):
    """Quantile score (I(y < q) - tau) * (q - y), elementwise."""
    y = np.asarray(y, dtype=float)
    return ((y < q).astype(float) - tau) * (q - y)


def quantile_score(obs, members, tau):
    """Mean quantile score with the predictive quantile taken as the
    empirical tau-quantile of all pooled simulated values."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    obs, m = _aligned(obs, members)
    o = obs[np.isfinite(obs)]
    s = m[np.isfinite(m)]
    if o.size == 0 or s.size == 0:
        raise ValueError("empty series")
    q = np.quantile(s, tau)
    return float(np.mean(pinball(q, o, tau)))


# ---------------------------------------------------------------------------


def evaluate_all(obs, members, dates, variable, criteria=None):
    """Every applicable criterion as a ``{name: value}`` dict.  Criteria that
    cannot be computed for this series are omitted."""
    if criteria is None:
        criteria = TEMPERATURE_CRITERIA if variable == "temperature" else PRECIPITATION_CRITERIA
    out = {}
    rm = None
    for c in criteria:
        try:
            if c in ("RMSE", "MAE"):
                rm = rm or rmse_mae(obs, members)
                val = rm[0] if c == "RMSE" else rm[1]
            elif c == "ZP01":
                val = zp(obs, members, 0.1)
            elif c == "ZP1":
                val = zp(obs, members, 1.0)
            elif c[0] == "Q":
                val = quantile_score(obs, members, int(c[1:]) / 100)
            elif c == "IQD":
                val = pooled_summary_iqd(obs, members, dates, "daily-marginal", variable)
            elif c in ("WM", "WS", "MM", "MS"):
                name = ("weekly" if c[0] == "W" else "monthly") + ("-mean" if c[1] == "M" else "-sd")
                val = pooled_summary_iqd(obs, members, dates, name, variable)
            elif c[0] == "D":
                val = pooled_summary_iqd(obs, members, dates, f"diff-{int(c[1:])}", variable)
            else:
                raise ValueError(f"unknown criterion {c!r}")
        except ValueError as err:
            logger.debug("criterion %s skipped: %s", c, err)
            continue
        if np.isfinite(val):
            out[c] = val
    return out


# ---------------------------------------------------------------------------
# Skill


def skill_score(s1, s0):
    """Relative improvement of competitor score ``s1`` over base score ``s0``."""
    if s0 == 0:
        warnings.warn("skill score undefined for a zero base score", RuntimeWarning)
        return float("nan")
    return (s0 - s1) / s0


def bootstrap_ci(s1, s0, n_boot=1000, seed=0, level=0.95, min_stations=10, criterion="", competitor="", base=""):
    """Skill of mean ``s1`` over mean ``s0`` with a station-bootstrap CI.

    Stations are resampled with replacement; each replicate recomputes both
    means and the skill.  The percentile interval is widened to include the
    point estimate if needed.
    """
    s1 = np.asarray(s1, dtype=float)
    s0 = np.asarray(s0, dtype=float)
    ok = np.isfinite(s1) & np.isfinite(s0)
    s1, s0 = s1[ok], s0[ok]
    if len(s1) < min_stations:
        raise ValueError(f"need at least {min_stations} stations with both scores, got {len(s1)}")
    skill = skill_score(s1.mean(), s0.mean())
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(s1), size=(n_boot, len(s1)))
    m1 = s1[idx].mean(axis=1)
    m0 = s0[idx].mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        reps = (m0 - m1) / m0
    reps = reps[np.isfinite(reps)]
    alpha = (1 - level) / 2
    lo, hi = np.quantile(reps, [alpha, 1 - alpha])
    return SkillSummary(criterion, competitor, base, skill, float(min(lo, skill)), float(max(hi, skill)))


def skill_table(scores, competitor, base, n_boot=1000, seed=0, criteria=None):
    """Skill summaries from a long scores table
    (``station_id, model, criterion, value``)."""
    df = scores.pivot_table(index=["criterion", "station_id"], columns="model", values="value", aggfunc="first")
    out = []
    for crit in criteria or sorted(df.index.get_level_values(0).unique()):
        if crit not in df.index.get_level_values(0):
            continue
        sub = df.loc[crit]
        if competitor not in sub or base not in sub:
            continue
        try:
            out.append(bootstrap_ci(sub[competitor].values, sub[base].values, n_boot, seed,
                                    criterion=crit, competitor=competitor, base=base))
        except ValueError as err:
            logger.warning("skill for %s skipped: %s", crit, err)
    return out


# ---------------------------------------------------------------------------
# Hexagonal aggregation


def hex_center(lon, lat, size):
    """Nearest centre of a pointy-top hexagonal lattice anchored at (0, 0)
    with circumradius ``size`` degrees.  Equidistant points go to the centre
    with the smaller (lat, lon)."""
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    w = np.sqrt(3.0) * size
    # fractional axial coordinates
    r = lat / (1.5 * size)
    q = lon / w - r / 2
    out = np.empty((len(lon), 2))
    for i in range(len(lon)):
        best = None
        for dr in (-1, 0, 1, 2):
            for dq in (-1, 0, 1, 2):
                rr = np.floor(r[i]) + dr
                qq = np.floor(q[i]) + dq
                cx = w * (qq + rr / 2)
                cy = 1.5 * size * rr
                d = round(np.hypot(lon[i] - cx, lat[i] - cy), 12)
                key = (d, cy, cx)
                if best is None or key < best:
                    best = key
        out[i] = best[2], best[1]
    return out


def hexbin_aggregate(lon, lat, values, size):
    """Per-hexagon mean and station count.

    Returns a DataFrame with columns ``hex_lon, hex_lat, mean_value, count``.
    """
    values = np.asarray(values, dtype=float)
    centers = hex_center(lon, lat, size)
    df = pd.DataFrame({"hex_lon": centers[:, 0], "hex_lat": centers[:, 1], "value": values})
    df = df[np.isfinite(df["value"])]
    g = df.groupby(["hex_lon", "hex_lat"], sort=True)["value"]
    return g.agg(mean_value="mean", count="count").reset_index()
