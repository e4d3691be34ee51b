"""Experiment orchestration: configuration, the repeated train/validate/test protocol,
alpha sweeps and metrics-only evaluation of prediction files.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics as M
from .data import (CsvSchema, SurvivalDataset, TimeGrid, load_csv, make_two_group_mixture,
                   quantile_time_grid, stratified_split)
from .dro import DroConfig, train_dro, train_exact_dro_cox, train_split_dro
from .losses import DeepHitConfig, LossSpec, point_losses
from .nn.models import ModelParams, ModelSpec, forward, predict_simplex
from .train import (COX_ALPHA_GRID, DEEPHIT_ALPHA_GRID, LAMBDA_GRID, Candidate, TrainConfig,
                    TrainingError, train_erm, train_regularized, tune, write_tuning_ledger)

log = logging.getLogger(__name__)

MODELS = ("cox-linear", "cox-mlp", "deephit")
METHODS = ("erm", "reg-fi", "reg-fg", "reg-fci", "reg-fcg", "dro", "dro-split", "dro-exact-cox")
REGULARIZER_OF = {"reg-fi": "F_I", "reg-fg": "F_G", "reg-fci": "F_CI", "reg-fcg": "F_CG"}
TUNE_METRICS = ("ci", "f_cg")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``data`` is either ``{"path": ..., "time": ..., "event": ..., "features": [...],
    "groups": [...], "standardize": bool}`` or ``{"synthetic": {...}}`` with keyword
    arguments for :func:`make_two_group_mixture`.
    """

    data: dict = field(default_factory=lambda: {"synthetic": {}})
    model: str = "cox-linear"
    method: str = "erm"
    alpha: float | None = None
    alpha_grid: tuple | None = None
    lambda_grid: tuple = LAMBDA_GRID
    dro_split: object = "two-fold"
    dro_tol: float = 1e-10
    lr: float = 0.01
    optimizer: str = "adam"
    max_iterations: int = 500
    batch_size: int | None = None
    hidden: tuple = (24,)
    beta: float = 0.5
    sigma: float = 1.0
    grid_points: int = 20
    group: str | None = None
    gamma: float = 0.01
    tune_metric: str = "ci"
    repeats: int = 10
    seed: int = 0
    out: str = "results"

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "dro-exact-cox" and self.model == "deephit":
            raise ConfigError("dro-exact-cox needs a Cox model")
        if self.method in ("reg-fg", "reg-fcg") and self.group is None and not self._synthetic:
            raise ConfigError(f"{self.method} needs a 'group' attribute")
        if self.tune_metric not in TUNE_METRICS:
            raise ConfigError(f"tune_metric must be one of {TUNE_METRICS}")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.alpha is not None and not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if not ("synthetic" in self.data or "path" in self.data):
            raise ConfigError("data needs either 'path' or 'synthetic'")
        try:
            self.train_config()
            if self.is_dro:
                self.dro_config(self.alpha or 0.5)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def _synthetic(self):
        return "synthetic" in self.data

    @property
    def is_dro(self):
        return self.method.startswith("dro")

    @property
    def group_name(self):
        return "group" if self.group is None and self._synthetic else self.group

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("alpha_grid", "lambda_grid", "hidden"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        return asdict(self)

    def train_config(self, **kw) -> TrainConfig:
        base = dict(lr=self.lr, optimizer=self.optimizer, max_iterations=self.max_iterations,
                    seed=self.seed, gamma=self.gamma, group=self.group_name,
                    batch_size=self.batch_size)
        base.update(kw)
        return TrainConfig(**base)

    def dro_config(self, alpha) -> DroConfig:
        split = self.dro_split if self.method == "dro-split" else None
        return DroConfig(alpha=alpha, tol=self.dro_tol, split=split, seed=self.seed)

    def default_alpha_grid(self):
        if self.alpha_grid is not None:
            return self.alpha_grid
        return DEEPHIT_ALPHA_GRID if self.model == "deephit" else COX_ALPHA_GRID


def load_config(path=None, overrides=None) -> ExperimentConfig:
    d = {}
    if path is not None:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(d)


def load_dataset(cfg: ExperimentConfig) -> SurvivalDataset:
    if cfg._synthetic:
        kw = dict(cfg.data["synthetic"])
        kw.setdefault("seed", cfg.seed)
        return make_two_group_mixture(**kw)
    schema = CsvSchema.from_dict({k: v for k, v in cfg.data.items() if k != "path"})
    return load_csv(cfg.data["path"], schema)


# --------------------------------------------------------------------------
# model construction, fitting and prediction
# --------------------------------------------------------------------------

@dataclass
class Setup:
    spec: ModelSpec
    loss: LossSpec
    grid: TimeGrid | None = None


def build(cfg: ExperimentConfig, train: SurvivalDataset) -> Setup:
    if cfg.model == "cox-linear":
        return Setup(ModelSpec.linear(train.d), LossSpec("cox"))
    if cfg.model == "cox-mlp":
        return Setup(ModelSpec.mlp_scalar(train.d, cfg.hidden), LossSpec("cox"))
    grid = quantile_time_grid(train, cfg.grid_points)
    dh = DeepHitConfig(beta=cfg.beta, sigma=cfg.sigma, grid=grid, n=train.n, delta_max=train.delta_max)
    spec = ModelSpec.mlp_simplex(train.d, grid.m * train.delta_max, cfg.hidden)
    return Setup(spec, LossSpec("deephit", dh), grid)


def fit(cfg: ExperimentConfig, setup: Setup, train: SurvivalDataset, hyper: dict, seed: int) -> ModelParams:
    """Train one model; ``hyper`` holds ``alpha`` (DRO) or ``lam`` (regularized)."""
    if setup.loss.kind == "deephit" and setup.loss.deephit.n != train.n:
        setup = Setup(setup.spec, LossSpec("deephit", replace(setup.loss.deephit, n=train.n)), setup.grid)
    tc = cfg.train_config(seed=seed)
    if cfg.method == "erm":
        return train_erm(train, setup.spec, setup.loss, tc)
    if cfg.method in REGULARIZER_OF:
        tc = replace(tc, lam=hyper["lam"], regularizer=REGULARIZER_OF[cfg.method])
        return train_regularized(train, setup.spec, setup.loss, tc)
    dro = replace(cfg.dro_config(hyper["alpha"]), seed=seed)
    if cfg.method == "dro":
        return train_dro(train, setup.spec, setup.loss, dro, tc)
    if cfg.method == "dro-split":
        return train_split_dro(train, setup.spec, setup.loss, dro, tc)
    return train_exact_dro_cox(train, setup.spec, dro, tc)


def deephit_survival(spec: ModelSpec, theta, X, m: int) -> np.ndarray:
    """S(t_k | x) = 1 - sum over event types and l <= k of the predicted pmf."""
    P = predict_simplex(spec, theta, X).value
    per_time = P.reshape(P.shape[0], -1, m).sum(axis=1)
    return np.clip(1.0 - np.cumsum(per_time, axis=1), 0.0, 1.0)


def predict(setup: Setup, params: ModelParams, train: SurvivalDataset, ds: SurvivalDataset) -> M.SurvivalPrediction:
    """Survival curves for ``ds``; Cox models use a Breslow baseline fitted on ``train``."""
    if setup.loss.kind == "cox":
        base = M.breslow_baseline(train, forward(setup.spec, params.theta, train.features).value)
        return M.cox_prediction(forward(setup.spec, params.theta, ds.features).value, base)
    return M.SurvivalPrediction(setup.grid, deephit_survival(setup.spec, params.theta, ds.features, setup.grid.m))


def evaluate_model(cfg, setup, params, train, ds) -> M.MetricsReport:
    pred = predict(setup, params, train, ds)
    return M.evaluate_predictions(ds, pred, proportional_hazards=setup.loss.kind == "cox",
                                  group=cfg.group_name, gamma=cfg.gamma)


def worst_group_loss(cfg, setup, params, ds) -> float:
    """Largest group mean of the per-point training loss evaluated on ``ds``."""
    loss = setup.loss
    if loss.kind == "deephit":
        loss = LossSpec("deephit", replace(loss.deephit, n=ds.n))
    u = point_losses(setup.spec, params.theta, ds, loss).value
    labels = ds.groups[cfg.group_name]
    return float(max(u[labels == g].mean() for g in np.unique(labels)))


# --------------------------------------------------------------------------
# protocol
# --------------------------------------------------------------------------

def hyper_grid(cfg: ExperimentConfig) -> list:
    if cfg.is_dro:
        alphas = (cfg.alpha,) if cfg.alpha is not None else cfg.default_alpha_grid()
        return [{"alpha": float(a)} for a in alphas]
    if cfg.method in REGULARIZER_OF:
        return [{"lam": float(v)} for v in cfg.lambda_grid]
    return [{}]


def splits(cfg: ExperimentConfig, ds: SurvivalDataset, repeat: int):
    """Fixed 80/20 train/test split, then a fresh 80/20 fit/validation split per repeat."""
    outer = stratified_split(ds, 0.8, cfg.seed)
    train, test = ds.subset(outer.d1_indices), ds.subset(outer.d2_indices)
    inner = stratified_split(train, 0.8, cfg.seed + 1000 + repeat)
    return train.subset(inner.d1_indices), train.subset(inner.d2_indices), test


def _tune_value(cfg, rep: M.MetricsReport) -> float:
    v = rep.ci_pct if cfg.tune_metric == "ci" else rep.f_cg
    return v if np.isfinite(v) else math.inf


def run_repeat(cfg: ExperimentConfig, ds: SurvivalDataset, repeat: int, ledger_path=None):
    """One repeat: returns (selected hyperparams, flagged, test MetricsReport)."""
    fit_ds, val, test = splits(cfg, ds, repeat)
    setup = build(cfg, fit_ds)
    seed = cfg.seed + repeat
    grid = hyper_grid(cfg)
    if len(grid) == 1:
        model = fit(cfg, setup, fit_ds, grid[0], seed)
        return grid[0], False, evaluate_model(cfg, setup, model, fit_ds, test)
    reference = replace(cfg, method="erm")
    ref_model = fit(reference, setup, fit_ds, {}, seed)
    ref_ctd = evaluate_model(cfg, setup, ref_model, fit_ds, val).ctd
    candidates, models = [], []
    for hp in grid:
        model = fit(cfg, setup, fit_ds, hp, seed)
        rep = evaluate_model(cfg, setup, model, fit_ds, val)
        candidates.append(Candidate(hp, rep.ctd, _tune_value(cfg, rep)))
        models.append(model)
    result = tune(candidates, ref_ctd)
    if result.flagged:
        log.warning("repeat %d: no candidate within 5%% of the reference C^td", repeat)
    if ledger_path is not None:
        write_tuning_ledger(candidates, result, ledger_path, extra=repeat)
    return result.hyperparams, result.flagged, evaluate_model(cfg, setup, models[result.index], fit_ds, test)


def _hp_text(hp):
    return ";".join(f"{k}={M.fmt(v)}" for k, v in sorted(hp.items()))


def run(cfg: ExperimentConfig) -> int:
    """Run all repeats, write ``metrics.csv`` and ``tuning.csv``; returns the number of failed repeats."""
    os.makedirs(cfg.out, exist_ok=True)
    ds = load_dataset(cfg)
    ledger = os.path.join(cfg.out, "tuning.csv")
    if os.path.exists(ledger):
        os.remove(ledger)
    cols = M.MetricsReport.columns()
    rows, failed = [], 0
    for r in range(cfg.repeats):
        try:
            hp, flagged, rep = run_repeat(cfg, ds, r, ledger)
            rows.append([str(r), "ok", _hp_text(hp), str(int(flagged))] + rep.row())
        except TrainingError as exc:
            log.error("repeat %d failed: %s", r, exc)
            failed += 1
            rows.append([str(r), "failed", "", "0"] + [M.fmt(float("nan"))] * len(cols))
    ok = np.array([[float(v) for v in row[4:]] for row in rows if row[1] == "ok"]).reshape(-1, len(cols))
    with open(os.path.join(cfg.out, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["repeat", "status", "hyperparams", "flagged"] + cols)
        w.writerows(rows)
        for name, fn in (("mean", np.mean), ("std", np.std)):
            vals = fn(ok, axis=0) if len(ok) else np.full(len(cols), np.nan)
            w.writerow([name, "", "", ""] + [M.fmt(v) for v in vals])
    with open(os.path.join(cfg.out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    return failed


SWEEP_COLUMNS = ("alpha", "ctd", "ibs", "ci", "f_ci", "f_cg", "worst_group_loss")


def sweep_alpha(cfg: ExperimentConfig, alphas) -> list:
    """Train one DRO model per alpha on repeat 0's fit split and score it on the test split."""
    if not cfg.is_dro:
        raise ConfigError("sweep-alpha needs a DRO method")
    ds = load_dataset(cfg)
    fit_ds, _, test = splits(cfg, ds, 0)
    setup = build(cfg, fit_ds)
    rows = []
    for a in alphas:
        if not 0 < a <= 1:
            raise ConfigError(f"alpha {a} outside (0, 1]")
        model = fit(cfg, setup, fit_ds, {"alpha": float(a)}, cfg.seed)
        rep = evaluate_model(cfg, setup, model, fit_ds, test)
        rows.append((float(a), rep.ctd, rep.ibs, rep.ci_pct, rep.f_ci, rep.f_cg,
                     worst_group_loss(cfg, setup, model, test)))
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([repr(row[0])] + [M.fmt(v) for v in row[1:]])
    return rows


# --------------------------------------------------------------------------
# metrics on a predictions file
# --------------------------------------------------------------------------

def read_predictions(path):
    """Parse a predictions CSV into (dataset, prediction or None, risk or None).

    Columns: ``time``, ``event``, optional ``risk``, ``group:<name>``, ``x:<name>`` and
    ``s:<t>`` (survival at time t).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path} is empty") from None
        body = [row for row in reader if row]
    for req in ("time", "event"):
        if req not in header:
            raise ConfigError(f"predictions file lacks a {req!r} column")
    cols = {h: k for k, h in enumerate(header)}

    def num(name):
        try:
            return np.array([float(r[cols[name]]) for r in body])
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"bad value in column {name!r}: {exc}") from None

    xs = [h for h in header if h.startswith("x:")]
    def at_time(h):
        try:
            return float(h[2:])
        except ValueError:
            raise ConfigError(f"survival column {h!r} does not name a time") from None

    ss = sorted((h for h in header if h.startswith("s:")), key=at_time)
    groups = {h[6:]: np.array([r[cols[h]] for r in body]) for h in header if h.startswith("group:")}
    feats = np.column_stack([num(h) for h in xs]) if xs else np.zeros((len(body), 0))
    ds = SurvivalDataset(feats, num("time"), num("event").astype(int), groups, tuple(h[2:] for h in xs))
    risk = num("risk") if "risk" in cols else None
    pred = None
    if ss:
        grid = TimeGrid(np.array([float(h[2:]) for h in ss]))
        pred = M.SurvivalPrediction(grid, np.column_stack([num(h) for h in ss]), risk)
    return ds, pred, risk


def evaluate_file(path, group=None, gamma=0.01) -> M.MetricsReport:
    """Metrics-only evaluation; metrics whose inputs are absent stay NaN."""
    ds, pred, risk = read_predictions(path)
    if group is None and len(ds.groups) == 1:
        group = next(iter(ds.groups))
    labels = ds.groups.get(group) if group is not None else None
    rep = M.MetricsReport()
    has_x = ds.d > 0
    if pred is not None:
        tq = M.percentile_times(ds.times)
        s_q = np.stack([pred.at(t) for t in tq], axis=1)
        rep.ctd = M._safe(M.concordance_td, ds, pred)
        rep.ibs = M._safe(M.ibs, ds, pred)
        if has_x:
            rep.f_ci = M._safe(M.fairness_censoring_individual, ds, s_q, gamma)
        if labels is not None:
            rep.f_cg = M._safe(M.fairness_censoring_group, ds, s_q, labels, gamma)
            if risk is None:
                rep.ci_pct = M._safe(M.concordance_imparity_td, ds, pred, labels, tq)
    outcome = np.exp(risk) if risk is not None else (s_q if pred is not None else None)
    if risk is not None and labels is not None:
        rep.ci_pct = M._safe(M.concordance_imparity, ds, risk, labels)
    if outcome is not None:
        if has_x:
            rep.f_i = M._safe(M.fairness_individual, outcome, ds.features, gamma)
        if labels is not None:
            rep.f_g = M._safe(M.fairness_group, outcome, labels)
        if ds.groups:
            rep.f_cap = M._safe(M.fairness_intersectional, outcome, list(ds.groups.values()))
    return rep
