import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drosurv import metrics as M
from drosurv.data import SurvivalDataset, TimeGrid

from conftest import make_ds, random_survival


# ---------------------------------------------------------------- oracles

def oracle_credit(yi, yj, di, dj, ri, rj):
    """Pair rule written out branch by branch; None means the pair is skipped."""
    if (yi < yj and di == 0) or (yj < yi and dj == 0) or (yi == yj and di == 0 and dj == 0):
        return None
    if yi < yj:
        return 1.0 if ri > rj else (0.5 if ri == rj else 0.0)
    if yi > yj:
        return 1.0 if ri < rj else (0.5 if ri == rj else 0.0)
    if di and dj:
        return 1.0 if ri == rj else 0.5
    if di == 0 and dj and ri < rj:
        return 1.0
    if di and dj == 0 and ri > rj:
        return 1.0
    return 0.5


def oracle_fractions(y, d, risk, labels):
    num, den = {}, {}
    for i in range(len(y)):
        for j in range(len(y)):
            if i == j:
                continue
            c = oracle_credit(y[i], y[j], d[i], d[j], risk[i], risk[j])
            if c is None:
                continue
            num[labels[i]] = num.get(labels[i], 0.0) + c
            den[labels[i]] = den.get(labels[i], 0) + 1
    return {a: num[a] / den[a] for a in den}


def oracle_ctd(ds, pred):
    num = den = 0.0
    y, d = ds.times, ds.events
    for i in range(ds.n):
        for j in range(ds.n):
            if i == j:
                continue
            t = min(y[i], y[j])
            ri = 1 - pred.at(t)[i]
            rj = 1 - pred.at(t)[j]
            c = oracle_credit(y[i], y[j], d[i], d[j], ri, rj)
            if c is None:
                continue
            num += c
            den += 1
    return num / den


def step_prediction(times, grid_points, s_values):
    return M.SurvivalPrediction(TimeGrid(np.asarray(grid_points, dtype=float)), np.asarray(s_values))


# ---------------------------------------------------------------- Breslow

def test_breslow_toy():
    ds = make_ds([1.0, 2.0], [1, 0])
    base = M.breslow_baseline(ds, np.zeros(2))
    assert base.hazards[0] == 0.5
    s = M.survival_curve([0.0], base)
    assert abs(s[0, 0] - np.exp(-0.5)) <= 1e-12
    assert M.cox_prediction(np.zeros(1), base).at(0.0)[0] == 1.0


def test_breslow_shift_and_ties():
    ds = make_ds([1.0, 1.0, 3.0], [1, 1, 1])
    f = np.array([0.2, -0.1, 0.4])
    base = M.breslow_baseline(ds, f)
    assert base.hazards[0] == pytest.approx(2 / np.exp(f).sum(), rel=1e-12)
    shifted = M.breslow_baseline(ds, f + 1.5)
    np.testing.assert_allclose(shifted.hazards, base.hazards * np.exp(-1.5), rtol=1e-12)
    assert M.breslow_baseline(ds, lambda X: np.zeros(len(X))).hazards[0] == pytest.approx(2 / 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_survival_curve_properties(seed):
    rng = np.random.default_rng(seed)
    ds = random_survival(rng, 15, d=2)
    if not ds.events.any():
        return
    base = M.breslow_baseline(ds, rng.standard_normal(15))
    S = M.survival_curve(rng.standard_normal(5), base)
    assert np.all(S > 0) and np.all(S <= 1)
    assert np.all(np.diff(S, axis=1) <= 0)
    big = M.survival_curve([60.0], base)
    assert big[0, 0] < 1e-12


# ---------------------------------------------------------------- concordance

def test_ctd_perfect_and_flat():
    ds = make_ds([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 1])
    grid = [1.0, 2.0, 3.0, 4.0]
    perfect = (np.array(grid)[None, :] < ds.times[:, None]).astype(float)
    assert M.concordance_td(ds, step_prediction(ds.times, grid, perfect)) == 1.0
    flat = np.full((4, 4), 0.5)
    assert M.concordance_td(ds, step_prediction(ds.times, grid, flat)) == 0.5
    with pytest.raises(ValueError):
        M.concordance_td(make_ds([1.0, 2.0], [0, 0]), step_prediction(None, [1.0], np.ones((2, 1))))


def test_ctd_matches_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(2, 31))
        ds = random_survival(rng, n, ties=bool(rng.integers(2)))
        if not ds.events.any():
            continue
        grid = np.unique(ds.times)
        raw = rng.integers(0, 4, (n, grid.size)) / 4.0  # coarse values force prediction ties
        S = 1 - np.cumsum(raw, axis=1) / (raw.sum(axis=1, keepdims=True) + 1)
        pred = step_prediction(ds.times, grid, S)
        try:
            expected = oracle_ctd(ds, pred)
        except ZeroDivisionError:
            continue
        assert M.concordance_td(ds, pred) == expected


def test_ctd_monotone_transform_invariance(rng):
    ds = random_survival(rng, 20, d=2)
    base = M.breslow_baseline(ds, rng.standard_normal(20))
    f = rng.standard_normal(20)
    a = M.concordance_td(ds, M.cox_prediction(f, base))
    b = M.concordance_td(ds, M.cox_prediction(2 * f + 1, base))
    assert a == b


def test_ci_hand_instance():
    ds = make_ds([1, 2, 1, 2], [1, 1, 1, 1])
    labels = np.array(["g1", "g1", "g2", "g2"])
    cf = M.concordance_fractions(ds, [10, 5, 1, 2], labels)
    assert cf["g1"] == 2 / 3 and cf["g2"] == 1 / 3
    assert M.concordance_imparity(ds, [10, 5, 1, 2], labels) == pytest.approx(33.3333333, abs=1e-6)


def test_ci_matches_oracle(rng):
    checked = 0
    while checked < 50:
        n = int(rng.integers(4, 31))
        ds = random_survival(rng, n, ties=True, groups=2)
        risk = rng.integers(0, 3, n).astype(float)
        labels = ds.groups["g"]
        expected = oracle_fractions(ds.times, ds.events, risk, labels)
        if set(expected) != set(np.unique(labels)):
            continue
        assert M.concordance_fractions(ds, risk, labels) == expected
        vals = list(expected.values())
        assert M.concordance_imparity(ds, risk, labels) == (max(vals) - min(vals)) * 100
        checked += 1


def test_ci_identical_groups_and_equal_scores(rng):
    half = random_survival(rng, 10)
    ds = SurvivalDataset(np.vstack([half.features] * 2), np.concatenate([half.times] * 2),
                         np.concatenate([half.events] * 2))
    labels = np.repeat(["a", "b"], 10)
    # the group-a rows and their copies see the same comparisons
    risk = np.concatenate([half.features[:, 0]] * 2)
    assert M.concordance_imparity(ds, risk, labels) == 0.0
    distinct = make_ds(np.arange(1.0, 9.0), [1, 0, 1, 1, 0, 1, 1, 1])
    assert M.concordance_imparity(distinct, np.zeros(8), np.array(list("abababab"))) == 0.0


def test_ci_shift_invariance(rng):
    ds = random_survival(rng, 25, ties=True, groups=3)
    risk = rng.standard_normal(25)
    a = M.concordance_imparity(ds, risk, ds.groups["g"])
    assert M.concordance_imparity(ds, risk + 7.25, ds.groups["g"]) == a


def test_ci_group_without_pairs_is_named():
    # the only member of "lonely" is censored before everybody else
    ds = make_ds([1, 2, 3], [0, 1, 1])
    with pytest.raises(ValueError, match="lonely"):
        M.concordance_imparity(ds, [1, 2, 3], np.array(["lonely", "x", "x"]))


# ---------------------------------------------------------------- IBS

def oracle_ibs(ds, pred, times):
    y, d = ds.times, ds.events

    def G(t, left=False):
        val = 1.0
        for s in np.unique(y[d == 0]):
            if s < t or (s == t and not left):
                at = np.sum(y >= s)
                val *= 1 - np.sum((y == s) & (d == 0)) / at
        return max(val, 1e-8)

    bs = []
    for t in times:
        s = pred.at(t)
        tot = 0.0
        for i in range(ds.n):
            if y[i] <= t and d[i] == 1:
                tot += s[i] ** 2 / G(y[i], left=True)
            elif y[i] > t:
                tot += (1 - s[i]) ** 2 / G(t)
        bs.append(tot / ds.n)
    area = sum((bs[k] + bs[k + 1]) / 2 * (times[k + 1] - times[k]) for k in range(len(times) - 1))
    return area / (times[-1] - times[0])


def test_ibs_perfect_predictions_zero():
    ds = make_ds([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 1])
    grid = [1.0, 2.0, 3.0, 4.0]
    S = (np.array(grid)[None, :] < ds.times[:, None]).astype(float)
    assert M.ibs(ds, step_prediction(None, grid, S), times=grid) == 0.0


def test_ibs_matches_oracle(rng):
    for _ in range(30):
        n = int(rng.integers(3, 11))
        ds = random_survival(rng, n, ties=bool(rng.integers(2)))
        grid = np.unique(ds.times)
        if grid.size < 2:
            continue
        S = np.sort(rng.random((n, grid.size)), axis=1)[:, ::-1]
        pred = step_prediction(None, grid, S)
        times = grid[:-1] if grid.size > 2 else grid
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = M.ibs(ds, pred, times=times)
        assert abs(got - oracle_ibs(ds, pred, times)) <= 1e-10


def test_ibs_no_censoring_equals_plain_brier(rng):
    ds = make_ds(rng.exponential(size=12) + 0.1, np.ones(12, dtype=int))
    grid = np.sort(ds.times)
    S = np.sort(rng.random((12, 12)), axis=1)[:, ::-1]
    pred = step_prediction(None, grid, S)
    times = grid[:-1]
    plain = [np.mean((pred.at(t) - (ds.times > t)) ** 2) for t in times]
    expected = np.trapezoid(plain, times) / (times[-1] - times[0]) if hasattr(np, "trapezoid") else \
        np.trapz(plain, times) / (times[-1] - times[0])
    assert abs(M.ibs(ds, pred, times=times) - expected) <= 1e-12


def test_ibs_clamps_with_warning():
    ds = make_ds([1.0, 2.0], [1, 0])
    pred = step_prediction(None, [1.0, 2.0], [[0.5, 0.2], [0.9, 0.8]])
    with pytest.warns(RuntimeWarning):
        assert np.isfinite(M.ibs(ds, pred, times=[1.0, 2.0]))


# ---------------------------------------------------------------- fairness

def test_fairness_individual_cases():
    X = np.array([[0.0], [10.0]])
    assert M.fairness_individual([0.0, 1.0], X, 0.01) == pytest.approx(0.9, abs=1e-12)
    assert M.fairness_individual([0.0, 1.0], X, 0.1) == 0.0
    assert M.fairness_individual([2.0, 2.0], np.zeros((2, 1)), 0.01) == 0.0
    with pytest.raises(ValueError):
        M.fairness_individual([0.0, 1.0], X, 0.0)


def test_fairness_individual_matches_pair_sum(rng):
    h = rng.random(9)
    X = rng.standard_normal((9, 3))
    expected = sum(max(abs(h[i] - h[j]) - 0.05 * np.linalg.norm(X[i] - X[j]), 0)
                   for i, j in itertools.combinations(range(9), 2))
    assert M.fairness_individual(h, X, 0.05) == pytest.approx(expected, abs=1e-12)


def test_fairness_group_cases():
    assert M.fairness_group([1.0, 1.0, 3.0, 3.0], np.array(list("aabb"))) == 1.0
    assert M.fairness_group([1.0, 4.0, 2.0], np.array(list("aaa"))) == 0.0
    assert M.fairness_group(np.full(5, 0.3), np.array(list("ababa"))) == 0.0


def test_fairness_intersectional_cases():
    a = np.array(list("aabb"))
    b = np.array(list("xyxy"))
    assert M.fairness_intersectional(np.ones(4), [a, b]) == 0.0
    assert M.fairness_intersectional([1.0, np.e], [np.array(list("pq"))]) == pytest.approx(1.0)
    assert M.fairness_intersectional([np.e, 1.0], [np.array(list("pq"))]) == pytest.approx(1.0)
    with pytest.warns(RuntimeWarning, match="empty"):
        M.fairness_intersectional([1.0, 2.0, 3.0], [np.array(list("aab")), np.array(list("xyx"))])
    with pytest.raises(ValueError):
        M.fairness_intersectional([-1.0, 1.0], [np.array(list("pq"))])


def test_censoring_fairness_cases():
    ds = make_ds([1.0, 2.0], [0, 1], X=[[0.0], [1.0]])
    assert M.fairness_censoring_individual(ds, [0.9, 0.4], 0.01) == pytest.approx(0.49, abs=1e-12)
    assert M.fairness_censoring_individual(ds, [0.9, 0.4], 1.0) == 0.0
    earlier = make_ds([2.0, 1.0], [0, 1], X=[[0.0], [1.0]])
    assert M.fairness_censoring_individual(earlier, [0.9, 0.4], 0.01) == 0.0
    with pytest.raises(ValueError):
        M.fairness_censoring_individual(make_ds([1.0], [1]), [0.5], 0.01)


def test_censoring_group_cases(rng):
    ds = random_survival(rng, 20, d=2)
    s = rng.random(20)
    one = np.zeros(20, dtype=int)
    assert M.fairness_censoring_group(ds, s, one, 0.01) == M.fairness_censoring_individual(ds, s, 0.01)
    assert M.fairness_censoring_group(ds, s, one, 100.0) == 0.0
    split = make_ds([1.0, 2.0, 1.0, 2.0], [0, 0, 1, 1])
    labels = np.array(["a", "a", "b", "b"])
    assert M.fairness_censoring_group(split, rng.random(4), labels, 0.01) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 1.0), st.floats(0.001, 1.0))
def test_fairness_nonincreasing_in_gamma(seed, g1, g2):
    lo, hi = sorted((g1, g2))
    rng = np.random.default_rng(seed)
    ds = random_survival(rng, 12, d=2, groups=2)
    if ds.events.all() or not ds.events.any():
        return
    s = rng.random((12, 3))
    assert M.fairness_individual(s, ds.features, hi) <= M.fairness_individual(s, ds.features, lo)
    assert M.fairness_censoring_individual(ds, s, hi) <= M.fairness_censoring_individual(ds, s, lo)
    lab = ds.groups["g"]
    assert M.fairness_censoring_group(ds, s, lab, hi) <= M.fairness_censoring_group(ds, s, lab, lo)


def test_report_csv(tmp_path):
    rep = M.MetricsReport(ctd=0.123456789, ibs=0.2)
    rep.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "ctd,ibs,ci_pct,f_i,f_g,f_cap,f_ci,f_cg"
    assert lines[1].startswith("0.123457,0.2,nan")
