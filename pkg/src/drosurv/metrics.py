"""Survival-curve estimation plus accuracy (C^td, IBS) and fairness metrics.

All pair loops are vectorized row by row, so memory stays O(n) per row.
"""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import SurvivalDataset, TimeGrid, event_time_grid

G_FLOOR = 1e-8


@dataclass(frozen=True)
class SurvivalPrediction:
    """Step-function survival curves ``survival[i, l] = S(t_l | x_i)`` on ``grid``.

    ``risk`` is the scalar score used by concordance imparity (log partial
    hazard for Cox models); it may be ``None`` for discrete-time models.
    """

    grid: TimeGrid
    survival: np.ndarray
    risk: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.survival, dtype=float)
        if s.ndim != 2 or s.shape[1] != self.grid.m:
            raise ValueError("survival matrix must be (n, m)")
        object.__setattr__(self, "survival", s)

    @property
    def n(self):
        return self.survival.shape[0]

    def _extended(self):
        return np.concatenate([np.ones((self.n, 1)), self.survival], axis=1)

    def at(self, t) -> np.ndarray:
        """S(t | x_i) for every subject at a single time (1 before the first grid point)."""
        k = int(np.searchsorted(self.grid.points, float(t), side="right"))
        return self._extended()[:, k]

    def at_pairs(self, rows, times) -> np.ndarray:
        """S(times[k] | x_{rows[k]}) elementwise."""
        k = np.searchsorted(self.grid.points, np.asarray(times, dtype=float), side="right")
        return self._extended()[np.asarray(rows), k]

    def subset(self, idx):
        risk = None if self.risk is None else np.asarray(self.risk)[idx]
        return SurvivalPrediction(self.grid, self.survival[idx], risk)


@dataclass(frozen=True)
class BreslowBaseline:
    grid: TimeGrid
    hazards: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.hazards)


def breslow_baseline(ds: SurvivalDataset, scores) -> BreslowBaseline:
    """h0_l = d_l / sum_{Y_i >= t_l} exp(f(x_i)) on the training event-time grid."""
    scores = np.asarray(scores(ds.features) if callable(scores) else scores, dtype=float)
    grid = event_time_grid(ds)
    ev = ds.events != 0
    top = scores.max()
    w = np.exp(scores - top)
    # risk-set sums via a reverse cumulative sum over time-sorted rows
    order = np.argsort(ds.times, kind="stable")
    t_sorted = ds.times[order]
    tail = np.cumsum(w[order][::-1])[::-1]
    first = np.searchsorted(t_sorted, grid.points, side="left")
    at_risk = tail[first]
    d = np.array([np.sum(ev & (ds.times == t)) for t in grid.points], dtype=float)
    return BreslowBaseline(grid, d / at_risk * np.exp(-top))


def survival_curve(scores, baseline: BreslowBaseline) -> np.ndarray:
    """S(t_l | x) = exp(-H0(t_l) exp(f(x))) for each score, shape ``(n, m)``."""
    scores = np.atleast_1d(np.asarray(scores, dtype=float))
    return np.exp(-np.outer(np.exp(scores), baseline.cumulative))


def cox_prediction(scores, baseline: BreslowBaseline) -> SurvivalPrediction:
    scores = np.asarray(scores, dtype=float)
    return SurvivalPrediction(baseline.grid, survival_curve(scores, baseline), scores)


# --------------------------------------------------------------------------
# concordance
# --------------------------------------------------------------------------

def pair_credit(yi, yj, di, dj, ri, rj):
    """Comparable mask and concordance credit for ordered pairs (i, j).

    Mirrors the tie ladder of the concordance-fraction algorithm; higher risk
    means an earlier expected event. Arguments broadcast.
    """
    yi, yj, di, dj, ri, rj = np.broadcast_arrays(*(np.asarray(a) for a in (yi, yj, di, dj, ri, rj)))
    ci, cj = di == 0, dj == 0
    skip = ((yi < yj) & ci) | ((yj < yi) & cj) | ((yi == yj) & ci & cj)
    credit = np.zeros(yi.shape)
    lt, gt, eq = yi < yj, yi > yj, yi == yj
    credit[lt & (ri > rj)] = 1.0
    credit[lt & (ri == rj)] = 0.5
    credit[gt & (ri < rj)] = 1.0
    credit[gt & (ri == rj)] = 0.5
    both = eq & ~ci & ~cj
    credit[both & (ri == rj)] = 1.0
    credit[both & (ri != rj)] = 0.5
    cens_first = eq & ci & ~cj & (ri < rj)
    cens_second = eq & ~ci & cj & (ri > rj)
    other = eq & ~both & ~cens_first & ~cens_second
    credit[cens_first | cens_second] = 1.0
    credit[other] = 0.5
    return ~skip, np.where(skip, 0.0, credit)


def _concordance_counts(y, d, risk_fn, labels=None):
    """Numerator/denominator per label over ordered pairs i != j.

    ``risk_fn(i)`` returns ``(r_i, r_j_vector)`` for row i against every row.
    """
    n = y.size
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels)
    num, den = {}, {}
    for i in range(n):
        ri, rj = risk_fn(i)
        ok, credit = pair_credit(y[i], y, d[i], d, ri, rj)
        ok[i] = False
        credit[i] = 0.0
        a = labels[i]
        num[a] = num.get(a, 0.0) + credit.sum()
        den[a] = den.get(a, 0) + int(ok.sum())
    return num, den


def concordance_td(ds: SurvivalDataset, pred: SurvivalPrediction) -> float:
    """Time-dependent concordance: pairs compared through S at the earlier observed time."""
    y, d = ds.times, ds.events

    def risk(i):
        t = np.minimum(y[i], y)
        ri = 1.0 - pred.at_pairs(np.full(y.size, i), t)
        rj = 1.0 - pred.at_pairs(np.arange(y.size), t)
        return ri, rj

    num, den = _concordance_counts(y, d, risk)
    if den[0] == 0:
        raise ValueError("no comparable pairs")
    return float(num[0] / den[0])


def concordance_fractions(ds: SurvivalDataset, risk, labels) -> dict:
    risk = np.asarray(risk, dtype=float)
    num, den = _concordance_counts(ds.times, ds.events, lambda i: (risk[i], risk), labels)
    out = {}
    for a in np.unique(labels):
        if den.get(a, 0) == 0:
            raise ValueError(f"group {a!r} has no comparable pairs")
        out[a] = num[a] / den[a]
    return out


def concordance_imparity(ds: SurvivalDataset, risk, labels) -> float:
    """Largest gap between per-group concordance fractions, in percent."""
    cf = list(concordance_fractions(ds, risk, labels).values())
    if len(cf) < 2:
        return 0.0
    return float((max(cf) - min(cf)) * 100.0)


def concordance_imparity_td(ds: SurvivalDataset, pred: SurvivalPrediction, labels, times) -> float:
    """CI averaged over ``times`` with risk 1 - S(t | x)."""
    return float(np.mean([concordance_imparity(ds, 1.0 - pred.at(t), labels) for t in times]))


# --------------------------------------------------------------------------
# Brier score
# --------------------------------------------------------------------------

def censoring_km(times, events):
    """Kaplan-Meier estimate of the censoring survival G, returned as (jump times, G after jump)."""
    times = np.asarray(times, dtype=float)
    cens = np.asarray(events) == 0
    u = np.unique(times[cens])
    at_risk = np.array([np.sum(times >= s) for s in u], dtype=float)
    c = np.array([np.sum(cens & (times == s)) for s in u], dtype=float)
    return u, np.cumprod(1.0 - c / at_risk)


def _g_eval(jumps, values, t, left=False):
    k = np.searchsorted(jumps, np.asarray(t, dtype=float), side="left" if left else "right")
    return np.concatenate([[1.0], values])[k]


def brier_scores(ds: SurvivalDataset, pred: SurvivalPrediction, times) -> np.ndarray:
    """IPCW Brier score at each time in ``times``."""
    y, ev = ds.times, ds.events != 0
    jumps, gvals = censoring_km(y, ds.events)
    g_left = _g_eval(jumps, gvals, y, left=True)
    clamped = False
    if np.any(g_left[ev] < G_FLOOR):
        clamped = True
    g_left = np.maximum(g_left, G_FLOOR)
    out = []
    for t in times:
        s = pred.at(t)
        g_t = float(_g_eval(jumps, gvals, t))
        if g_t < G_FLOOR:
            clamped = True
            g_t = G_FLOOR
        died = (y <= t) & ev
        alive = y > t
        out.append(np.mean(np.where(died, s * s / g_left, 0.0) + np.where(alive, (1 - s) ** 2 / g_t, 0.0)))
    if clamped:
        warnings.warn("censoring survival hit zero; IPCW weights clamped", RuntimeWarning, stacklevel=2)
    return np.array(out)


def ibs(ds: SurvivalDataset, pred: SurvivalPrediction, times=None) -> float:
    """Trapezoidal integral of the Brier score over ``times`` divided by its span.

    By default the prediction grid points below the largest observed time are used.
    """
    if times is None:
        pts = pred.grid.points
        keep = pts[pts < ds.times.max()]
        times = keep if keep.size else pts
    times = np.asarray(times, dtype=float)
    bs = brier_scores(ds, pred, times)
    if times.size == 1:
        return float(bs[0])
    area = np.sum(0.5 * (bs[1:] + bs[:-1]) * np.diff(times))
    return float(area / (times[-1] - times[0]))


# --------------------------------------------------------------------------
# fairness
# --------------------------------------------------------------------------

def _as_columns(outcomes):
    o = np.asarray(outcomes, dtype=float)
    return o.reshape(-1, 1) if o.ndim == 1 else o


def _hinge_sum(o, X, gamma, pair_rows):
    """sum over (i, j in pair_rows(i)) of [|o_i - o_j| - gamma ||x_i - x_j||]_+ per column."""
    total = np.zeros(o.shape[1])
    for i in range(o.shape[0]):
        js = pair_rows(i)
        if js.size == 0:
            continue
        dist = np.linalg.norm(X[js] - X[i], axis=1)
        total += np.maximum(np.abs(o[js] - o[i]) - gamma * dist[:, None], 0.0).sum(axis=0)
    return total


def fairness_individual(outcomes, features, gamma=0.01) -> float:
    """Sum over pairs i<j of [|o_i - o_j| - gamma ||x_i - x_j||]_+, averaged over outcome columns."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    o = _as_columns(outcomes)
    X = np.asarray(features, dtype=float)
    n = o.shape[0]
    return float(_hinge_sum(o, X, gamma, lambda i: np.arange(i + 1, n)).mean())


def _group_ids(labels):
    labels = np.asarray(labels)
    groups = np.unique(labels)
    return labels, groups


def fairness_group(outcomes, labels) -> float:
    """max_g |mean_g(o) - mean(o)|, averaged over outcome columns."""
    o = _as_columns(outcomes)
    labels, groups = _group_ids(labels)
    pop = o.mean(axis=0)
    devs = []
    for g in groups:
        sel = labels == g
        if not sel.any():
            raise ValueError(f"empty group {g!r}")
        devs.append(np.abs(o[sel].mean(axis=0) - pop))
    return float(np.max(devs, axis=0).mean())


def fairness_intersectional(outcomes, partitions) -> float:
    """Worst absolute log ratio between intersectional cell means (outcomes must be > 0)."""
    o = _as_columns(outcomes)
    parts = [np.asarray(p) for p in partitions]
    means = []
    for cell in itertools.product(*(np.unique(p) for p in parts)):
        sel = np.ones(o.shape[0], dtype=bool)
        for p, v in zip(parts, cell):
            sel &= p == v
        if not sel.any():
            warnings.warn(f"empty intersectional cell {cell}; skipped", RuntimeWarning, stacklevel=2)
            continue
        means.append(o[sel].mean(axis=0))
    means = np.array(means)
    if np.any(means <= 0):
        raise ValueError("intersectional fairness needs positive outcomes")
    logs = np.log(means)
    return float((logs.max(axis=0) - logs.min(axis=0)).mean())


def _censoring_pairs(ds, labels=None):
    cens = np.flatnonzero(ds.events == 0)
    unc = np.flatnonzero(ds.events != 0)
    if cens.size == 0 or unc.size == 0:
        raise ValueError("censoring fairness needs both censored and uncensored subjects")
    y = ds.times

    def rows(i):
        js = unc[y[unc] >= y[i]]
        if labels is not None:
            js = js[labels[js] == labels[i]]
        return js

    return cens, unc, rows


def fairness_censoring_individual(ds: SurvivalDataset, outcomes, gamma=0.01) -> float:
    """Censored-vs-later-uncensored hinge sum normalised by |N_c||N_uc|, averaged over columns."""
    o = _as_columns(outcomes)
    cens, unc, rows = _censoring_pairs(ds)
    total = np.zeros(o.shape[1])
    X = ds.features
    for i in cens:
        js = rows(i)
        if js.size:
            dist = np.linalg.norm(X[js] - X[i], axis=1)
            total += np.maximum(np.abs(o[js] - o[i]) - gamma * dist[:, None], 0.0).sum(axis=0)
    return float((total / (cens.size * unc.size)).mean())


def fairness_censoring_group(ds: SurvivalDataset, outcomes, labels, gamma=0.01) -> float:
    """F_CI restricted to within-group pairs, still normalised by the global |N_c||N_uc|."""
    o = _as_columns(outcomes)
    labels = np.asarray(labels)
    cens, unc, rows = _censoring_pairs(ds, labels)
    total = np.zeros(o.shape[1])
    X = ds.features
    for i in cens:
        js = rows(i)
        if js.size:
            dist = np.linalg.norm(X[js] - X[i], axis=1)
            total += np.maximum(np.abs(o[js] - o[i]) - gamma * dist[:, None], 0.0).sum(axis=0)
    return float((total / (cens.size * unc.size)).mean())


def percentile_times(times) -> np.ndarray:
    return np.percentile(np.asarray(times, dtype=float), [25, 50, 75])


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    ctd: float = float("nan")
    ibs: float = float("nan")
    ci_pct: float = float("nan")
    f_i: float = float("nan")
    f_g: float = float("nan")
    f_cap: float = float("nan")
    f_ci: float = float("nan")
    f_cg: float = float("nan")

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def row(self):
        return [fmt(v) for v in asdict(self).values()]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            w.writerow(self.row())


def fmt(v) -> str:
    """Six significant digits."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(v)
    return f"{float(v):.6g}"


def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ValueError:
        return float("nan")


def evaluate_predictions(ds: SurvivalDataset, pred: SurvivalPrediction, *, proportional_hazards: bool,
                         group: str | None = None, gamma: float = 0.01, times=None) -> MetricsReport:
    """All metrics for one model on one evaluation set.

    Proportional-hazards models use the partial hazard exp(risk) for F_I, F_G and
    F_cap and the log partial hazard for CI. Other models use S(t|x) (and
    1 - S(t|x) for CI) averaged over the 25/50/75th percentile times.
    """
    tq = percentile_times(ds.times)
    s_q = np.stack([pred.at(t) for t in tq], axis=1)
    labels = ds.groups.get(group) if group is not None else None
    if proportional_hazards:
        outcome = np.exp(pred.risk)
    else:
        outcome = s_q
    rep = MetricsReport()
    rep.ctd = _safe(concordance_td, ds, pred)
    rep.ibs = _safe(ibs, ds, pred, times)
    rep.f_i = _safe(fairness_individual, outcome, ds.features, gamma)
    rep.f_ci = _safe(fairness_censoring_individual, ds, s_q, gamma)
    if labels is not None:
        if proportional_hazards:
            rep.ci_pct = _safe(concordance_imparity, ds, pred.risk, labels)
        else:
            rep.ci_pct = _safe(concordance_imparity_td, ds, pred, labels, tq)
        rep.f_g = _safe(fairness_group, outcome, labels)
        rep.f_cg = _safe(fairness_censoring_group, ds, s_q, labels, gamma)
    if ds.groups:
        cap_outcome = outcome if proportional_hazards else s_q
        rep.f_cap = _safe(fairness_intersectional, cap_outcome, list(ds.groups.values()))
    return rep
