"""Chi-square DRO: the dual objective, the eta bisection and the DRO training loops.

For per-point losses ``u`` the dual objective is

    L(eta) = C_alpha * sqrt(mean([u - eta]_+^2)) + eta,
    C_alpha = sqrt(2 (1/alpha - 1)^2 + 1),

which is convex in eta. Training alternates an exact eta solve with a gradient
step on the model parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SurvivalDataset, event_time_grid, snap_censored_times, stratified_kfold, stratified_split
from .losses import LossSpec, cox_full_losses, optimal_psi, point_losses
from .nn import autodiff as ad
from .nn.models import ModelParams, ModelSpec, forward, init_params
from .train import TrainConfig, TrainingError, descend


@dataclass(frozen=True)
class DroConfig:
    """``split``: None (heuristic), ``"two-fold"`` or an int K for K-fold cross-fitting."""

    alpha: float = 0.2
    tol: float = 1e-10
    split: object = None
    split_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        c_alpha(self.alpha)
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.split not in (None, "two-fold") and not (isinstance(self.split, int) and self.split >= 2):
            raise ValueError("split must be None, 'two-fold' or an integer K >= 2")

    @property
    def c(self) -> float:
        return c_alpha(self.alpha)


def c_alpha(alpha: float) -> float:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    return float(np.sqrt(2 * (1 / alpha - 1) ** 2 + 1))


def dro_objective(losses, eta: float, c: float) -> float:
    u = np.asarray(losses, dtype=float)
    r = np.maximum(u - eta, 0.0)
    return float(c * np.sqrt(np.mean(r * r)) + eta)


def eta_subgradient(losses, eta: float, c: float) -> float:
    """d/d(eta) of the dual objective: 1 - C mean(r)/sqrt(mean(r^2)); 1 when every r is 0."""
    r = np.maximum(np.asarray(losses, dtype=float) - eta, 0.0)
    ms = np.mean(r * r)
    if ms == 0:
        return 1.0
    return float(1.0 - c * np.mean(r) / np.sqrt(ms))


def solve_eta(losses, c: float, tol: float = 1e-10):
    """Minimize the dual objective over eta; returns ``(eta, value)``.

    For ``c == 1`` (alpha = 1) the infimum is the sample mean, approached as
    eta -> -inf; ``(min(losses), mean(losses))`` is returned. Otherwise eta is
    bisected on the subgradient inside ``[lo - (hi - lo)/(c - 1) - 1, hi + 1]``
    where lo/hi are the smallest/largest losses.
    """
    u = np.asarray(losses, dtype=float).reshape(-1)
    if u.size == 0:
        raise ValueError("no losses")
    if not np.all(np.isfinite(u)):
        raise ad.NumericError("non-finite individual loss")
    if c < 1:
        raise ValueError("C_alpha must be >= 1")
    lo_u, hi_u = float(u.min()), float(u.max())
    if lo_u == hi_u:
        return hi_u, hi_u
    if c == 1:
        return lo_u, float(np.mean(u))
    lo = lo_u - (hi_u - lo_u) / (c - 1) - 1.0
    hi = hi_u + 1.0
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if hi - lo <= tol or mid in (lo, hi):  # second test: float spacing exceeds tol
            break
        if eta_subgradient(u, mid, c) < 0:
            lo = mid
        else:
            hi = mid
    # the minimum often sits on a kink (eta equal to one of the losses); score those too
    cands = [lo, hi, *u[(u >= lo - tol) & (u <= hi + tol)]]
    vals = [dro_objective(u, e, c) for e in cands]
    best = min(range(len(cands)), key=lambda k: (vals[k], -cands[k]))
    return float(cands[best]), float(vals[best])


def dro_value(losses, alpha: float) -> float:
    return solve_eta(losses, c_alpha(alpha))[1]


def dro_weights(losses, eta: float, c: float) -> np.ndarray:
    """w with d(objective)/d(theta) = sum_i w_i d(u_i)/d(theta) at fixed eta.

    ``c == 1`` uses the mean-gradient weights 1/n of the alpha = 1 infimum; all
    losses below eta give zero weights (so all-zero weights when eta >= max(u)).
    """
    u = np.asarray(losses, dtype=float)
    n = u.size
    if c == 1:
        return np.full(n, 1.0 / n)
    r = np.maximum(u - eta, 0.0)
    ms = np.mean(r * r)
    if ms == 0:
        return np.zeros(n)
    return c * r / (n * np.sqrt(ms))


def envelope_weights(losses, eta: float, c: float) -> np.ndarray:
    """Weights of the worst-case distribution at an optimal ``eta``.

    Equal to :func:`dro_weights` except when the optimum sits at ``eta = max(u)``:
    the dual value is then ``max(u)`` and its gradient is that of the largest
    loss (a point mass, shared equally between tied maxima).
    """
    w = dro_weights(losses, eta, c)
    if c == 1 or np.any(w):
        return w
    u = np.asarray(losses, dtype=float)
    top = u == u.max()
    return top / top.sum()


def _weighted_backward(leaf, u, w):
    if not np.any(w):
        return np.zeros_like(leaf.value)
    ad.backward((u * w).sum())
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)


def dro_grad_theta(loss_fn, theta, eta: float, c: float):
    """Objective value and gradient w.r.t. ``theta`` at fixed ``eta``.

    ``loss_fn(Var) -> Var`` returns the vector of individual losses.
    """
    leaf = ad.Var(np.array(theta, dtype=float, copy=True), requires_grad=True)
    u = loss_fn(leaf)
    uv = u.value
    if not np.all(np.isfinite(uv)):
        raise ad.NumericError("non-finite individual loss")
    value = float(np.mean(uv)) if c == 1 else dro_objective(uv, eta, c)
    return value, _weighted_backward(leaf, u, dro_weights(uv, eta, c))


def dro_step(loss_fn, theta, c: float, tol: float):
    """Solve eta at the current theta and return ``(objective, gradient, eta)``."""
    leaf = ad.Var(np.array(theta, dtype=float, copy=True), requires_grad=True)
    u = loss_fn(leaf)
    eta, value = solve_eta(u.value, c, tol)
    return value, _weighted_backward(leaf, u, envelope_weights(u.value, eta, c)), eta


def train_dro(ds: SurvivalDataset, spec: ModelSpec, loss: LossSpec, dro: DroConfig, cfg: TrainConfig,
              log: list | None = None, theta0=None) -> ModelParams:
    """Heuristic DRO: individual losses keep their full-data adjacency sets."""
    theta0 = init_params(spec, cfg.seed) if theta0 is None else theta0
    c = dro.c

    def loss_fn(th):
        return point_losses(spec, th, ds, loss)

    def step(theta, it):
        value, g, eta = dro_step(loss_fn, theta, c, dro.tol)
        return value, g, {"eta": eta}

    theta = descend(step, theta0, cfg, log)
    return ModelParams(spec, theta, meta={"method": "dro", "alpha": dro.alpha})


def split_losses(spec, theta, ds, loss, fold, rest):
    """L_i(theta; A_i intersect rest) for every i in ``fold``."""
    return point_losses(spec, theta, ds, loss, pts=fold, cand=rest)


def split_dro_objective(theta, eta, ds, fold, rest, spec, loss, c) -> float:
    fold = np.asarray(fold, dtype=int)
    if fold.size == 0:
        raise ValueError("empty training half")
    u = split_losses(spec, theta, ds, loss, fold, rest).value
    return dro_objective(u, eta, c)


def make_folds(ds: SurvivalDataset, dro: DroConfig) -> list:
    if dro.split in (None, "two-fold"):
        s = stratified_split(ds, dro.split_fraction, dro.seed)
        return [s.d1_indices, s.d2_indices]
    return stratified_kfold(ds, dro.split, dro.seed)


def cross_fit_step(spec, theta, ds, loss, folds, c, tol):
    """One cross-fitting evaluation: per-fold eta solves, averaged objective and gradient."""
    everything = np.arange(ds.n)
    values, grads, etas = [], [], []
    for fold in folds:
        rest = np.setdiff1d(everything, fold)

        def loss_fn(th, fold=fold, rest=rest):
            return split_losses(spec, th, ds, loss, fold, rest)

        v, g, eta = dro_step(loss_fn, theta, c, tol)
        values.append(v)
        grads.append(g)
        etas.append(eta)
    k = len(folds)
    return sum(values) / k, sum(grads) / k, etas


def train_split_dro(ds: SurvivalDataset, spec: ModelSpec, loss: LossSpec, dro: DroConfig,
                    cfg: TrainConfig, log: list | None = None, theta0=None, folds=None) -> ModelParams:
    """Sample-splitting DRO with cross-fitting over two (or K) folds.

    Each fold keeps its own dual variable; the parameter step uses the average of
    the per-fold gradients, i.e. theta -= lr/2 * (g1 + g2) for two folds.
    """
    theta0 = init_params(spec, cfg.seed) if theta0 is None else theta0
    folds = make_folds(ds, dro) if folds is None else folds
    c = dro.c

    def step(theta, it):
        value, g, etas = cross_fit_step(spec, theta, ds, loss, folds, c, dro.tol)
        extras = {"eta": etas[0], "eta_prime": etas[1] if len(etas) == 2 else ";".join(map(str, etas[1:]))}
        return value, g, extras

    theta = descend(step, theta0, cfg, log)
    return ModelParams(spec, theta, meta={"method": "dro-split", "alpha": dro.alpha, "folds": len(folds)})


def full_cox_losses(spec, params, ds, grid):
    """Individual full Cox losses for a flat vector ``[theta, psi]``."""
    params = ad.as_var(params)
    p = spec.n_params
    f = forward(spec, params[:p], ds.features)
    return cox_full_losses(f, params[p:], ds.times, ds.events, grid)


def prepare_exact_cox(ds: SurvivalDataset):
    """Event grid and the dataset with censored times snapped onto it."""
    grid = event_time_grid(ds)
    return grid, snap_censored_times(ds, grid)


def train_exact_dro_cox(ds: SurvivalDataset, spec: ModelSpec, dro: DroConfig, cfg: TrainConfig,
                        log: list | None = None, theta0=None, psi0=None) -> ModelParams:
    """Exact DRO Cox: DRO over the decoupled full-likelihood losses in ``(theta, psi)``.

    ``ds`` is snapped internally. psi starts at its closed-form optimum for the
    initial theta; theta and psi share the learning rate.
    """
    if not spec.scalar:
        raise ValueError("exact DRO Cox needs a scalar-score model")
    grid, snapped = prepare_exact_cox(ds)
    theta0 = init_params(spec, cfg.seed) if theta0 is None else np.asarray(theta0, dtype=float)
    if psi0 is None:
        psi0 = optimal_psi(snapped, forward(spec, theta0, snapped.features).value, grid)
    c = dro.c

    def loss_fn(params):
        return full_cox_losses(spec, params, snapped, grid)

    def step(params, it):
        value, g, eta = dro_step(loss_fn, params, c, dro.tol)
        return value, g, {"eta": eta}

    joint = descend(step, np.concatenate([theta0, psi0]), cfg, log)
    p = spec.n_params
    return ModelParams(spec, joint[:p], psi=joint[p:],
                       meta={"method": "dro-exact-cox", "alpha": dro.alpha, "grid": grid.points.tolist()})


__all__ = [
    "DroConfig", "TrainingError", "c_alpha", "dro_objective", "eta_subgradient", "solve_eta",
    "dro_value", "dro_weights", "dro_grad_theta", "train_dro", "split_dro_objective",
    "train_split_dro", "train_exact_dro_cox", "full_cox_losses", "make_folds",
]
