import csv

import numpy as np
import pytest

from drosurv.data import TimeGrid, make_two_group_mixture
from drosurv.gradcheck import run_suites
from drosurv.losses import DeepHitConfig, LossSpec, point_losses
from drosurv.nn.models import ModelSpec, forward, init_params
from drosurv.train import (Candidate, TrainConfig, fairness_penalty, train_erm, train_regularized,
                           training_outcomes, tune, write_log, write_tuning_ledger)

from conftest import random_survival


def test_train_config_invariants():
    for kw in ({"lr": 0.0}, {"lam": -1.0}, {"max_iterations": -1}, {"regularizer": "F_X"},
               {"optimizer": "rmsprop"}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_erm_descends_on_separable_data():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((60, 2))
    times = np.exp(-2 * X[:, 0]) + 0.01 * rng.random(60)
    from drosurv.data import SurvivalDataset
    ds = SurvivalDataset(X, times, np.ones(60, dtype=int))
    log = []
    train_erm(ds, ModelSpec.linear(2), LossSpec("cox"), TrainConfig(lr=0.01, max_iterations=10), log)
    obj = [row["objective"] for row in log]
    assert all(b < a for a, b in zip(obj, obj[1:]))


def test_zero_iterations_and_determinism():
    ds = make_two_group_mixture(n=80, seed=3)
    spec = ModelSpec.mlp_scalar(ds.d, (6,))
    p0 = train_erm(ds, spec, LossSpec("cox"), TrainConfig(max_iterations=0, seed=4))
    np.testing.assert_array_equal(p0.theta, init_params(spec, 4))
    cfg = TrainConfig(max_iterations=15, seed=4, optimizer="adam", batch_size=30)
    a = train_erm(ds, spec, LossSpec("cox"), cfg)
    b = train_erm(ds, spec, LossSpec("cox"), cfg)
    assert np.array_equal(a.theta, b.theta)


def test_lambda_zero_matches_erm():
    ds = make_two_group_mixture(n=60, seed=1)
    spec = ModelSpec.linear(ds.d)
    cfg = TrainConfig(max_iterations=20, lr=0.05)
    a = train_erm(ds, spec, LossSpec("cox"), cfg)
    b = train_regularized(ds, spec, LossSpec("cox"), TrainConfig(max_iterations=20, lr=0.05, lam=0.0,
                                                                  regularizer="F_G", group="group"))
    assert np.array_equal(a.theta, b.theta)


def test_group_regularizer_shrinks_gap():
    ds = make_two_group_mixture(n=200, seed=5)
    spec = ModelSpec.linear(ds.d)
    labels = ds.groups["group"]

    def gap(theta):
        h = np.exp(forward(spec, theta, ds.features).value)
        return abs(h[labels == "minority"].mean() - h[labels == "majority"].mean())

    base = TrainConfig(max_iterations=150, lr=0.05, optimizer="adam", regularizer="F_G", group="group")
    free = train_regularized(ds, spec, LossSpec("cox"), base)
    tight = train_regularized(ds, spec, LossSpec("cox"), TrainConfig(**{**base.__dict__, "lam": 20.0}))
    assert gap(tight.theta) < gap(free.theta)


def test_regularizer_gradients_match_finite_differences():
    worst = run_suites(seed=11, instances=20, names=["reg_F_I", "reg_F_G", "reg_F_CI", "reg_F_CG"])
    assert max(worst.values()) <= 1e-4, worst


def test_penalty_needs_group_and_censoring(rng):
    ds = random_survival(rng, 8)
    o = np.ones(8)
    with pytest.raises(ValueError):
        fairness_penalty("F_G", o, ds)
    all_events = random_survival(rng, 8, censor=0.0)
    with pytest.raises(ValueError):
        fairness_penalty("F_CI", o, all_events)


def test_deephit_training_outcomes_are_survival(rng):
    ds = random_survival(rng, 12, d=2)
    grid = TimeGrid(np.quantile(ds.times, [0.2, 0.5, 0.8]))
    loss = LossSpec("deephit", DeepHitConfig(beta=0.5, sigma=1.0, grid=grid, n=12))
    spec = ModelSpec.mlp_simplex(2, grid.m, (4,))
    out = training_outcomes(spec, init_params(spec, 0), ds, loss).value
    assert out.shape == (12, 3)
    assert np.all(out >= 0) and np.all(out <= 1)
    assert np.all(np.diff(out, axis=1) <= 1e-15)


def test_deephit_minibatch_erm_runs(rng):
    ds = random_survival(rng, 40, d=2)
    grid = TimeGrid(np.quantile(ds.times, [0.25, 0.5, 0.75]))
    loss = LossSpec("deephit", DeepHitConfig(beta=0.5, sigma=1.0, grid=grid, n=40))
    spec = ModelSpec.mlp_simplex(2, grid.m, (8,))
    log = []
    train_erm(ds, spec, loss, TrainConfig(max_iterations=30, optimizer="adam", batch_size=16), log)
    assert np.isfinite(log[-1]["objective"])


def test_tune_rule_walkthrough():
    cands = [Candidate({"k": "A"}, 0.79, 1.0), Candidate({"k": "B"}, 0.77, 0.2),
             Candidate({"k": "C"}, 0.70, 0.0)]
    res = tune(cands, 0.80)
    assert res.hyperparams == {"k": "B"} and not res.flagged
    res = tune([Candidate({"k": "A"}, 0.5, 1.0), Candidate({"k": "B"}, 0.6, 9.0)], 0.9)
    assert res.hyperparams == {"k": "B"} and res.flagged
    assert tune([Candidate({"k": "A"}, 0.9, 3.0)], 0.9).index == 0
    with pytest.raises(ValueError):
        tune([], 0.8)


def test_tune_never_violates_rule(rng):
    for _ in range(200):
        ref = rng.uniform(0.5, 0.9)
        cands = [Candidate({"i": k}, rng.uniform(0.4, 0.95), rng.random()) for k in range(5)]
        res = tune(cands, ref)
        ok = [c for c in cands if c.val_ctd >= 0.95 * ref]
        if ok:
            assert cands[res.index].val_ctd >= 0.95 * ref
            assert cands[res.index].val_fairness == min(c.val_fairness for c in ok)


def test_ledger_and_log_files(tmp_path):
    cands = [Candidate({"lam": 1.0}, 0.7, 0.1), Candidate({"lam": 0.4}, 0.72, 0.3)]
    res = tune(cands, 0.72)
    write_tuning_ledger(cands, res, tmp_path / "t.csv", extra=0)
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert [r["selected"] for r in rows] == ["1", "0"]
    write_log([{"iteration": 0, "objective": 1.5, "eta": 0.2}], tmp_path / "log.csv")
    text = (tmp_path / "log.csv").read_text().splitlines()
    assert text[0] == "iteration,objective,eta,eta_prime"
