"""Training configuration, optimizers, ERM and fairness-regularized baselines, and tuning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import SurvivalDataset, kappa_clamped
from .losses import LossSpec, point_losses
from .nn import autodiff as ad
from .nn.models import ModelParams, ModelSpec, forward, init_params, predict_simplex

REGULARIZERS = ("none", "F_I", "F_G", "F_CI", "F_CG")
COX_ALPHA_GRID = (0.1, 0.15, 0.2, 0.3, 0.4, 0.5)
DEEPHIT_ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))
LAMBDA_GRID = (1.0, 0.7, 0.4)


class TrainingError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    optimizer: str = "sgd"
    max_iterations: int = 500
    seed: int = 0
    lam: float = 0.0
    regularizer: str = "none"
    gamma: float = 0.01
    group: str | None = None
    batch_size: int | None = None
    alpha_grid: tuple = COX_ALPHA_GRID
    lambda_grid: tuple = LAMBDA_GRID
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, g):
        return theta - self.lr * g


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, g):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig, lr=None):
    lr = cfg.lr if lr is None else lr
    if cfg.optimizer == "sgd":
        return SGD(lr)
    return Adam(lr, cfg.adam_betas, cfg.adam_eps)


def descend(step_fn: Callable, theta0, cfg: TrainConfig, log: list | None = None):
    """Generic loop: ``step_fn(theta, iteration) -> (objective, gradient, extras)``."""
    opt = make_optimizer(cfg)
    theta = np.array(theta0, dtype=float, copy=True)
    for it in range(cfg.max_iterations):
        try:
            value, g, extras = step_fn(theta, it)
        except ad.NumericError as exc:
            raise TrainingError(str(exc), it) from exc
        if not np.isfinite(value) or not np.all(np.isfinite(g)):
            raise TrainingError("objective or gradient is not finite", it)
        if log is not None:
            log.append({"iteration": it, "objective": value, **extras})
        theta = opt.step(theta, g)
    if not np.all(np.isfinite(theta)):
        raise TrainingError("parameters diverged", cfg.max_iterations)
    return theta


def write_log(rows: Sequence[dict], path, columns=("iteration", "objective", "eta", "eta_prime")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r.get(c, "") for c in columns])


# --------------------------------------------------------------------------
# fairness regularizers
# --------------------------------------------------------------------------

def percentile_times(times) -> np.ndarray:
    return np.percentile(np.asarray(times, dtype=float), [25, 50, 75])


def training_outcomes(spec: ModelSpec, theta, ds: SurvivalDataset, loss: LossSpec):
    """Differentiable predicted outcomes, shape ``(n, T)``.

    Cox: partial hazard ``exp(f)`` (T = 1). DeepHit: survival at the 25/50/75th
    percentile of the training times (T = 3).
    """
    if loss.kind == "cox":
        return ad.exp(forward(spec, theta, ds.features)).reshape(ds.n, 1)
    cfg = loss.deephit
    P = predict_simplex(spec, theta, ds.features)
    m = cfg.grid.m
    tq = percentile_times(ds.times)
    k = np.searchsorted(cfg.grid.points, tq, side="right")  # 0 means before t_1 -> S = 1
    # S(t) = 1 - sum_{l <= k} sum_delta f_{delta,l}
    sel = np.zeros((cfg.delta_max * m, tq.size))
    for c, kk in enumerate(k):
        for dlt in range(cfg.delta_max):
            sel[dlt * m: dlt * m + kk, c] = 1.0
    return 1.0 - P @ sel


def _pair_hinge(o, ds, gamma, pair_mask):
    """sum over masked pairs of [|o_i - o_j| - gamma ||x_i - x_j||]_+, summed over columns/T."""
    n, T = o.shape
    dist = np.linalg.norm(ds.features[:, None, :] - ds.features[None, :, :], axis=2)
    diff = o.reshape(n, 1, T) - o.reshape(1, n, T)
    hinge = ad.relu(ad.abs_(diff) - (gamma * dist)[:, :, None])
    return (hinge * pair_mask[:, :, None].astype(float)).sum() * (1.0 / T)


def fairness_penalty(kind: str, outcomes, ds: SurvivalDataset, gamma=0.01, group=None):
    """Differentiable training-set fairness term for the regularized baselines.

    F_I is averaged over pairs (rather than summed) so that lambda values in the
    usual grid are comparable with the base loss.
    """
    o = ad.as_var(outcomes)
    if o.ndim == 1:
        o = o.reshape(-1, 1)
    n, T = o.shape
    if kind == "F_I":
        upper = np.triu(np.ones((n, n), dtype=bool), 1)
        return _pair_hinge(o, ds, gamma, upper) * (1.0 / max(upper.sum(), 1))
    if kind in ("F_CI", "F_CG"):
        cens = ds.events == 0
        unc = ~cens
        if not cens.any() or not unc.any():
            raise ValueError("censoring fairness needs censored and uncensored rows")
        pairs = cens[:, None] & unc[None, :] & (ds.times[None, :] >= ds.times[:, None])
        if kind == "F_CG":
            labels = _labels(ds, group)
            pairs &= labels[:, None] == labels[None, :]
        return _pair_hinge(o, ds, gamma, pairs) * (1.0 / (cens.sum() * unc.sum()))
    if kind == "F_G":
        labels = _labels(ds, group)
        pop = o.mean(axis=0)
        total = None
        for t in range(T):
            col = o[:, t]
            devs = [ad.abs_(col[np.flatnonzero(labels == g)].mean() - pop[t]) for g in np.unique(labels)]
            worst = devs[int(np.argmax([float(d.value) for d in devs]))]
            total = worst if total is None else total + worst
        return total * (1.0 / T)
    raise ValueError(f"unknown fairness regularizer {kind!r}")


def _labels(ds, group):
    if group is None:
        if len(ds.groups) != 1:
            raise ValueError("group fairness needs a named group attribute")
        group = next(iter(ds.groups))
    if group not in ds.groups:
        raise ValueError(f"dataset has no group attribute {group!r}")
    return ds.groups[group]


# --------------------------------------------------------------------------
# ERM and regularized training
# --------------------------------------------------------------------------

def regularized_objective(spec, theta, ds, loss, cfg: TrainConfig):
    obj = point_losses(spec, theta, ds, loss).mean()
    if cfg.regularizer != "none" and cfg.lam > 0:
        outcomes = training_outcomes(spec, theta, ds, loss)
        obj = obj + cfg.lam * fairness_penalty(cfg.regularizer, outcomes, ds, cfg.gamma, cfg.group)
    return obj


def train_erm(ds: SurvivalDataset, spec: ModelSpec, loss: LossSpec, cfg: TrainConfig,
              log: list | None = None, theta0=None) -> ModelParams:
    """Gradient descent on the mean individual loss (full batch unless ``batch_size`` is set)."""
    theta0 = init_params(spec, cfg.seed) if theta0 is None else theta0
    rng = np.random.default_rng(cfg.seed + 1)

    def step(theta, it):
        if cfg.batch_size and cfg.batch_size < ds.n:
            batch = ds.subset(np.sort(rng.choice(ds.n, cfg.batch_size, replace=False)))
        else:
            batch = ds
        value, g = ad.grad(lambda th: point_losses(spec, th, batch, loss).mean(), theta)
        return value, g, {}

    theta = descend(step, theta0, cfg, log)
    return ModelParams(spec, theta, meta={"method": "erm"})


def train_regularized(ds: SurvivalDataset, spec: ModelSpec, loss: LossSpec, cfg: TrainConfig,
                      log: list | None = None, theta0=None) -> ModelParams:
    """Minimize base loss + lambda * fairness term on the full training set."""
    theta0 = init_params(spec, cfg.seed) if theta0 is None else theta0

    def step(theta, it):
        value, g = ad.grad(lambda th: regularized_objective(spec, th, ds, loss, cfg), theta)
        return value, g, {}

    theta = descend(step, theta0, cfg, log)
    return ModelParams(spec, theta, meta={"method": f"reg-{cfg.regularizer}", "lambda": cfg.lam})


# --------------------------------------------------------------------------
# hyperparameter selection
# --------------------------------------------------------------------------

@dataclass
class Candidate:
    hyperparams: dict
    val_ctd: float
    val_fairness: float


@dataclass
class TuneResult:
    index: int
    hyperparams: dict
    flagged: bool
    qualifying: list = field(default_factory=list)


def tune(candidates: Sequence[Candidate], reference_ctd: float, tolerance: float = 0.05) -> TuneResult:
    """Pick the fairest candidate whose validation C^td is within 5% of the reference.

    Falls back to the most accurate candidate (``flagged=True``) when none qualifies.
    """
    if not candidates:
        raise ValueError("no candidates to tune over")
    floor = (1 - tolerance) * reference_ctd
    ok = [k for k, c in enumerate(candidates) if np.isfinite(c.val_ctd) and c.val_ctd >= floor]
    if ok:
        best = min(ok, key=lambda k: (candidates[k].val_fairness, -candidates[k].val_ctd, k))
        return TuneResult(best, candidates[best].hyperparams, False, ok)
    ctd = [c.val_ctd if np.isfinite(c.val_ctd) else -np.inf for c in candidates]
    best = int(np.argmax(ctd))
    return TuneResult(best, candidates[best].hyperparams, True, [])


def write_tuning_ledger(candidates: Sequence[Candidate], result: TuneResult, path, extra=None):
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if fh.tell() == 0:
            w.writerow(["repeat", "hyperparams", "val_ctd", "val_fairness", "selected", "flagged"])
        for k, c in enumerate(candidates):
            hp = ";".join(f"{a}={b}" for a, b in sorted(c.hyperparams.items()))
            w.writerow([extra if extra is not None else "", hp, f"{c.val_ctd:.6g}",
                        f"{c.val_fairness:.6g}", int(k == result.index), int(result.flagged)])


def with_updates(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
