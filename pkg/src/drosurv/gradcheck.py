"""Finite-difference suites comparing reverse-mode gradients with independent numpy routes.

Each suite draws small random instances (n <= 10, d <= 5) and reports the worst
relative error. The numeric side never goes through the autodiff graph: it uses
the scalar per-point reference losses or the numpy fairness metrics.
"""

from __future__ import annotations

import numpy as np

from . import metrics as M
from .data import SurvivalDataset, TimeGrid
from .dro import c_alpha, dro_grad_theta, dro_objective, solve_eta
from .losses import (DeepHitConfig, LossSpec, adjacency, cox_individual_loss, cox_partial_loss,
                     deephit_individual_loss, point_losses)
from .nn import autodiff as ad
from .nn.models import ModelSpec, forward, init_params, predict_simplex
from .train import TrainConfig, regularized_objective

TOLERANCE = 1e-4


def random_dataset(rng, n=None, d=None, censor=0.3, ties=False, groups=True) -> SurvivalDataset:
    n = int(rng.integers(4, 11)) if n is None else n
    d = int(rng.integers(1, 6)) if d is None else d
    X = rng.standard_normal((n, d))
    times = rng.integers(1, 5, n).astype(float) if ties else rng.exponential(1.0, n) + 0.05
    events = (rng.random(n) > censor).astype(int)
    events[0] = 1
    g = {"g": np.array(["a", "b"])[np.arange(n) % 2]} if groups else {}
    return SurvivalDataset(X, times, events, g)


def _check(analytic, fn, theta, step=1e-6):
    return ad.relative_error(analytic, ad.finite_difference(fn, theta, step))


def check_cox(rng) -> float:
    ds = random_dataset(rng, ties=bool(rng.integers(2)))
    spec = ModelSpec.linear(ds.d)
    theta = rng.standard_normal(ds.d)
    _, g = ad.grad(lambda th: point_losses(spec, th, ds, LossSpec("cox")).mean(), theta)
    return _check(g, lambda th: cox_partial_loss(ds, lambda x: float(x @ th)), theta)


def check_deephit(rng, beta) -> float:
    ds = random_dataset(rng)
    m = int(rng.integers(2, 5))
    grid = TimeGrid(np.sort(rng.choice(ds.times, m, replace=False)))
    cfg = DeepHitConfig(beta=beta, sigma=float(rng.uniform(0.3, 2.0)), grid=grid, n=ds.n)
    spec = ModelSpec.mlp_simplex(ds.d, m, hidden=(4,))
    theta = init_params(spec, int(rng.integers(1 << 30))) + 0.1 * rng.standard_normal(spec.n_params)
    loss = LossSpec("deephit", cfg)
    _, g = ad.grad(lambda th: point_losses(spec, th, ds, loss).mean(), theta)

    def reference(th):
        pmf = lambda x: predict_simplex(spec, th, x.reshape(1, -1)).value[0]
        pts = [(ds.features[i], ds.times[i], ds.events[i]) for i in range(ds.n)]
        kind = loss.adjacency_kind
        total = 0.0
        for i, p in enumerate(pts):
            adj = adjacency(p, pts[:i] + pts[i + 1:], kind, grid)
            total += deephit_individual_loss(p, adj, pmf, cfg)
        return total / ds.n

    return _check(g, reference, theta)


def check_dro(rng) -> float:
    """Gradient at a fixed solved eta against differences of the dual objective at that eta.

    Instances whose optimum sits on the ``eta = max(u)`` kink are redrawn.
    """
    while True:
        ds = random_dataset(rng)
        spec = ModelSpec.linear(ds.d)
        theta = rng.standard_normal(ds.d)
        alpha = float(rng.choice([0.1, 0.2, 0.3, 0.5, 0.7, 0.9]))
        c = c_alpha(alpha)
        loss_fn = lambda th: point_losses(spec, th, ds, LossSpec("cox"))
        u = loss_fn(theta).value
        eta, _ = solve_eta(u, c)
        if np.min(np.abs(u - eta)) > 1e-3:
            break
    _, g = dro_grad_theta(loss_fn, theta, eta, c)

    def reference(th):
        pts = [(ds.features[i], ds.times[i], ds.events[i]) for i in range(ds.n)]
        score = lambda x: float(x @ th)
        v = [cox_individual_loss(p, adjacency(p, pts[:i] + pts[i + 1:], "cox"), score)
             for i, p in enumerate(pts)]
        return dro_objective(v, eta, c)

    return _check(g, reference, theta)


def check_regularizer(rng, kind) -> float:
    ds = random_dataset(rng, n=int(rng.integers(6, 11)))
    if kind in ("F_CI", "F_CG"):
        events = ds.events.copy()
        events[1], events[2] = 0, 1
        ds = SurvivalDataset(ds.features, ds.times, events, ds.groups)
    spec = ModelSpec.linear(ds.d)
    theta = 0.5 * rng.standard_normal(ds.d)
    lam = float(rng.uniform(0.5, 2.0))
    gamma = float(rng.uniform(0.01, 0.2))
    cfg = TrainConfig(lam=lam, regularizer=kind, gamma=gamma, group="g")
    _, g = ad.grad(lambda th: regularized_objective(spec, th, ds, LossSpec("cox"), cfg), theta)
    labels = ds.groups["g"]
    npairs = ds.n * (ds.n - 1) / 2

    def reference(th):
        h = np.exp(ds.features @ th)
        base = cox_partial_loss(ds, lambda x: float(x @ th))
        if kind == "F_I":
            pen = M.fairness_individual(h, ds.features, gamma) / npairs
        elif kind == "F_G":
            pen = M.fairness_group(h, labels)
        elif kind == "F_CI":
            pen = M.fairness_censoring_individual(ds, h, gamma)
        else:
            pen = M.fairness_censoring_group(ds, h, labels, gamma)
        return base + lam * pen

    return _check(g, reference, theta)


SUITES = {
    "dro_grad_theta": check_dro,
    "cox_partial_loss": check_cox,
    "deephit_beta0": lambda rng: check_deephit(rng, 0.0),
    "deephit_beta0.5": lambda rng: check_deephit(rng, 0.5),
    "deephit_beta1": lambda rng: check_deephit(rng, 1.0),
    "reg_F_I": lambda rng: check_regularizer(rng, "F_I"),
    "reg_F_G": lambda rng: check_regularizer(rng, "F_G"),
    "reg_F_CI": lambda rng: check_regularizer(rng, "F_CI"),
    "reg_F_CG": lambda rng: check_regularizer(rng, "F_CG"),
}


def run_suites(seed=0, instances=20, names=None) -> dict:
    """Worst relative error per suite over ``instances`` random draws."""
    out = {}
    for name in names or SUITES:
        rng = np.random.default_rng([seed, sorted(SUITES).index(name)])
        out[name] = max(SUITES[name](rng) for _ in range(instances))
    return out
