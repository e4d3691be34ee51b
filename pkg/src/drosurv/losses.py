"""Adjacency sets and individual losses for Cox, DeepHit and the full (piecewise-constant) Cox model.

Two routes are provided. The scalar functions (``cox_individual_loss`` and friends)
evaluate one data point at a time from plain callables and are the readable
reference. The vectorized functions (``cox_losses``, ``deephit_losses``,
``cox_full_losses``, :func:`point_losses`) operate on :class:`~drosurv.nn.Var`
tensors so that training can differentiate them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import SurvivalDataset, TimeGrid, kappa_clamped, kappa_snapped
from .nn import autodiff as ad
from .nn.models import ModelSpec, forward, predict_simplex

PROB_FLOOR = 1e-12
ADJACENCY_KINDS = ("cox", "deephit", "none")


@dataclass(frozen=True)
class DeepHitConfig:
    beta: float
    sigma: float
    grid: TimeGrid
    n: int
    delta_max: int = 1
    event_weights: tuple | None = None

    def __post_init__(self):
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.event_weights is not None and len(self.event_weights) != self.delta_max:
            raise ValueError("need one event weight per event type")

    def weight(self, delta: int) -> float:
        return 1.0 if self.event_weights is None else float(self.event_weights[delta - 1])


# --------------------------------------------------------------------------
# scalar reference route
# --------------------------------------------------------------------------

def adjacency(point, candidates: Sequence, kind: str, grid: TimeGrid | None = None) -> list:
    """Candidates adjacent to ``point = (x, y, delta)``.

    Censored points have no adjacent candidates. Cox uses ``y' >= y``; DeepHit uses
    the strict ``kappa(y') > kappa(y)`` appearing in its ranking sum.
    """
    if kind not in ADJACENCY_KINDS:
        raise ValueError(f"unknown adjacency kind {kind!r}")
    _, y, delta = point
    if delta == 0 or kind == "none":
        return []
    if kind == "cox":
        return [c for c in candidates if c[1] >= y]
    if grid is None:
        raise ValueError("deephit adjacency needs a time grid")
    k = kappa_clamped(y, grid)
    return [c for c in candidates if kappa_clamped(c[1], grid) > k]


def cox_individual_loss(point, adj_set: Sequence, score_fn: Callable) -> float:
    x, _, delta = point
    if delta == 0:
        return 0.0
    f = score_fn(x)
    scores = np.array([f] + [score_fn(c[0]) for c in adj_set])
    top = scores.max()
    return float(top + np.log(np.sum(np.exp(scores - top))) - f)


def cox_partial_loss(ds: SurvivalDataset, score_fn: Callable) -> float:
    """Mean negative log partial likelihood (Breslow handling of ties)."""
    pts = [(ds.features[i], ds.times[i], ds.events[i]) for i in range(ds.n)]
    total = 0.0
    for i, p in enumerate(pts):
        others = pts[:i] + pts[i + 1:]
        total += cox_individual_loss(p, adjacency(p, others, "cox"), score_fn)
    return total / ds.n


def _survival_from_pmf(pmf, k):
    """S_k = sum_{l > k} f_l with 1-based ``k``."""
    return float(np.sum(pmf[k:]))


def deephit_individual_loss(point, adj_set: Sequence, pmf_fn: Callable, cfg: DeepHitConfig) -> float:
    x, y, delta = point
    k = kappa_clamped(y, cfg.grid)
    pmf = np.asarray(pmf_fn(x), dtype=float)
    s_own = _survival_from_pmf(pmf, k)
    if delta:
        nll = -np.log(max(pmf[k - 1], PROB_FLOOR))
    else:
        nll = -np.log(max(s_own, PROB_FLOOR))
    rank = 0.0
    if delta:
        for c in adj_set:
            rank += np.exp((s_own - _survival_from_pmf(np.asarray(pmf_fn(c[0])), k)) / cfg.sigma)
        rank /= cfg.n
    return float(cfg.beta * nll + (1 - cfg.beta) * rank)


def deephit_competing_individual_loss(point, adj_set: Sequence, pmf_fn: Callable,
                                      cfg: DeepHitConfig, event_weights=None) -> float:
    """Competing-risks DeepHit loss; ``pmf_fn`` returns ``delta_max * m`` probabilities
    ordered event-major (all times of event 1, then event 2, ...)."""
    x, y, delta = point
    m = cfg.grid.m
    k = kappa_clamped(y, cfg.grid)
    pmf = np.asarray(pmf_fn(x), dtype=float).reshape(cfg.delta_max, m)
    if event_weights is None:
        event_weights = cfg.event_weights or (1.0,) * cfg.delta_max
    if delta:
        nll = -np.log(max(pmf[delta - 1, k - 1], PROB_FLOOR))
    else:
        nll = -np.log(max(1.0 - pmf[:, :k].sum(), PROB_FLOOR))
    rank = 0.0
    if delta:
        cif_own = pmf[delta - 1, :k].sum()
        for c in adj_set:
            other = np.asarray(pmf_fn(c[0]), dtype=float).reshape(cfg.delta_max, m)
            rank += np.exp((other[delta - 1, :k].sum() - cif_own) / cfg.sigma)
        rank *= event_weights[delta - 1] / cfg.n
    return float(cfg.beta * nll + (1 - cfg.beta) * rank)


def cox_full_individual_loss(point, score_fn: Callable, psi, grid: TimeGrid) -> float:
    """Negative full log likelihood under a piecewise-constant baseline hazard ``exp(psi)``.

    Censored times must already be snapped onto the grid (or 0).
    """
    x, y, delta = point
    k = kappa_snapped(y, delta, grid)
    psi = np.asarray(psi, dtype=float)
    f = score_fn(x)
    own = (f + psi[k - 1]) if (delta and k > 0) else 0.0
    integral = float(np.sum(grid.widths[:k] * np.exp(psi[:k])))
    return float(-own + np.exp(f) * integral)


def event_counts(ds: SurvivalDataset, grid: TimeGrid) -> np.ndarray:
    """d_l: number of events at each grid time."""
    ev = ds.events != 0
    return np.array([np.sum(ev & (ds.times == t)) for t in grid.points], dtype=float)


def optimal_psi(ds: SurvivalDataset, scores, grid: TimeGrid) -> np.ndarray:
    """Closed-form minimizer over psi of the full Cox loss for fixed scores."""
    scores = np.asarray(scores, dtype=float)
    d = event_counts(ds, grid)
    out = np.empty(grid.m)
    top = scores.max()
    w = np.exp(scores - top)
    for l, t in enumerate(grid.points):
        at_risk = w[ds.times >= t].sum()
        if at_risk <= 0:
            raise ValueError(f"empty risk set at grid time {t}")
        out[l] = np.log(d[l] / grid.widths[l]) - np.log(at_risk) - top
    return out


# --------------------------------------------------------------------------
# vectorized autodiff route
# --------------------------------------------------------------------------

def adjacency_mask(kind: str, y_pts, e_pts, y_cand, same=None, grid: TimeGrid | None = None):
    """Boolean ``(n_pts, n_cand)`` adjacency; ``same[i, j]`` marks the point itself."""
    y_pts = np.asarray(y_pts, dtype=float)
    y_cand = np.asarray(y_cand, dtype=float)
    ev = (np.asarray(e_pts) != 0)[:, None]
    if kind == "none":
        mask = np.zeros((y_pts.size, y_cand.size), dtype=bool)
    elif kind == "cox":
        mask = ev & (y_cand[None, :] >= y_pts[:, None])
    elif kind == "deephit":
        mask = ev & (kappa_clamped(y_cand, grid)[None, :] > kappa_clamped(y_pts, grid)[:, None])
    else:
        raise ValueError(f"unknown adjacency kind {kind!r}")
    if same is not None:
        mask &= ~same
    return mask


def cox_losses(f_pts, f_cand, e_pts, mask):
    """Per-point Cox losses: log-sum-exp over {self} plus the adjacent candidates, minus own score."""
    f_pts = ad.as_var(f_pts)
    f_cand = ad.as_var(f_cand)
    n_pts, n_cand = mask.shape
    cand = f_cand.reshape(1, n_cand) + np.zeros((n_pts, 1))
    logits = ad.concat([f_pts.reshape(n_pts, 1), cand], axis=1)
    full_mask = np.concatenate([np.ones((n_pts, 1), dtype=bool), mask], axis=1)
    ev = (np.asarray(e_pts) != 0).astype(float)
    return (ad.logsumexp(logits, axis=1, mask=full_mask) - f_pts) * ev


def _cif_matrix(m, delta_max):
    """Block matrix taking a flat event-major pmf to per-event CIFs sum_{l<=j} f_{delta,l}."""
    return np.kron(np.eye(delta_max), np.triu(np.ones((m, m))))


def deephit_losses(P_pts, P_cand, y_pts, e_pts, y_cand, mask, cfg: DeepHitConfig):
    """Per-point DeepHit losses for flat pmfs of width ``delta_max * m``.

    For ``delta_max = 1`` this is the single-risk loss with S_k = 1 - CIF_k.
    """
    P_pts = ad.as_var(P_pts)
    P_cand = ad.as_var(P_cand)
    m, dm = cfg.grid.m, cfg.delta_max
    e_pts = np.asarray(e_pts, dtype=int)
    k_pts = kappa_clamped(y_pts, cfg.grid) - 1  # 0-based
    k_pts = np.atleast_1d(k_pts)
    n_pts = k_pts.size
    ev = e_pts != 0
    # column of the own (event, time) cell; censored rows use event block 0 as a placeholder
    col = np.where(ev, (np.maximum(e_pts, 1) - 1) * m + k_pts, k_pts)
    onehot = np.zeros((n_pts, dm * m))
    onehot[np.arange(n_pts), col] = 1.0

    cif = P_pts @ _cif_matrix(m, dm)
    own_pmf = (P_pts * onehot).sum(axis=1)
    # censored: 1 - sum over all events of CIF_k
    total_cif = cif @ np.kron(np.ones((dm, 1)), np.eye(m))  # (n, m): sum over event blocks
    k_onehot = np.zeros((n_pts, m))
    k_onehot[np.arange(n_pts), k_pts] = 1.0
    surv_own = 1.0 - (total_cif * k_onehot).sum(axis=1)
    lik = ad.clip_min(own_pmf * ev + surv_own * (~ev), PROB_FLOOR)
    nll = -ad.log(lik)

    loss = nll * cfg.beta
    if cfg.beta < 1 and mask.any():
        cif_cand = P_cand @ _cif_matrix(m, dm)
        own_cif = (cif * onehot).sum(axis=1)
        other = onehot @ cif_cand.T  # (n_pts, n_cand): CIF_{delta_i, k_i}(x_j)
        expo = ad.exp((other - own_cif.reshape(n_pts, 1)) * (1.0 / cfg.sigma))
        rank = (expo * mask).sum(axis=1)
        weights = np.array([cfg.weight(e) if e else 0.0 for e in e_pts])
        loss = loss + rank * (weights * (1 - cfg.beta) / cfg.n)
    return loss


def cox_full_losses(f, psi, y, e, grid: TimeGrid):
    """Per-point full Cox losses; ``y`` must hold snapped censored times."""
    f = ad.as_var(f)
    psi = ad.as_var(psi)
    k = np.atleast_1d(kappa_snapped(y, e, grid))
    n, m = k.size, grid.m
    upto = (np.arange(1, m + 1)[None, :] <= k[:, None]).astype(float)  # l <= kappa_i
    pick = np.zeros((n, m))
    ev = (np.asarray(e) != 0) & (k > 0)
    pick[np.flatnonzero(ev), k[ev] - 1] = 1.0
    integral = upto @ (ad.exp(psi) * grid.widths)
    return -(f * ev.astype(float) + pick @ psi) + ad.exp(f) * integral


@dataclass(frozen=True)
class LossSpec:
    """Which survival loss to use and its hyperparameters.

    ``kind`` is ``"cox"`` or ``"deephit"``; DeepHit needs ``deephit``.
    """

    kind: str
    deephit: DeepHitConfig | None = None

    def __post_init__(self):
        if self.kind not in ("cox", "deephit"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "deephit" and self.deephit is None:
            raise ValueError("deephit loss needs a DeepHitConfig")

    @property
    def adjacency_kind(self) -> str:
        if self.kind == "deephit" and self.deephit.beta == 1:
            return "none"
        return self.kind


def point_losses(spec: ModelSpec, theta, ds: SurvivalDataset, loss: LossSpec, pts=None, cand=None):
    """Individual losses of rows ``pts`` with adjacency restricted to rows ``cand``.

    With both left as ``None`` every row is scored against all other rows (the
    usual coupled loss). Passing disjoint ``pts``/``cand`` gives the sample-split
    losses. Returns a :class:`Var` of length ``len(pts)``.
    """
    all_idx = np.arange(ds.n)
    pts = all_idx if pts is None else np.asarray(pts, dtype=int)
    cand = all_idx if cand is None else np.asarray(cand, dtype=int)
    same = pts[:, None] == cand[None, :]
    grid = loss.deephit.grid if loss.kind == "deephit" else None
    mask = adjacency_mask(loss.adjacency_kind, ds.times[pts], ds.events[pts], ds.times[cand],
                          same, grid)
    need = np.union1d(pts, cand[mask.any(axis=0)])
    pos = np.searchsorted(need, pts)
    used = mask.any(axis=0)
    cand_used = cand[used]
    cpos = np.searchsorted(need, cand_used)
    mask = mask[:, used]
    X = ds.features[need]
    if loss.kind == "cox":
        f = forward(spec, theta, X)
        return cox_losses(f[pos], f[cpos], ds.events[pts], mask)
    P = predict_simplex(spec, theta, X)
    return deephit_losses(P[pos], P[cpos], ds.times[pts], ds.events[pts], ds.times[cand_used],
                          mask, loss.deephit)


def mean_loss(spec, theta, ds, loss):
    """The ordinary (ERM) training loss."""
    return point_losses(spec, theta, ds, loss).mean()
