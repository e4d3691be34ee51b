import numpy as np
import pytest

from drosurv.data import SurvivalDataset


def make_ds(times, events, X=None, groups=None):
    times = np.asarray(times, dtype=float)
    if X is None:
        X = np.zeros((times.size, 1))
    return SurvivalDataset(np.asarray(X, dtype=float), times, np.asarray(events), groups or {})


def random_survival(rng, n, d=2, censor=0.3, ties=False, groups=0):
    X = rng.standard_normal((n, d))
    if ties:
        times = rng.integers(1, max(2, n // 3) + 1, n).astype(float)
    else:
        times = rng.exponential(1.0, n) + 0.01
    events = (rng.random(n) > censor).astype(int)
    g = {}
    if groups:
        labels = np.array([f"g{k}" for k in range(groups)])[np.arange(n) % groups]
        g["g"] = rng.permutation(labels)
    return SurvivalDataset(X, times, events, g)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, name, ok, detail=""):
    """Remember one acceptance outcome; the terminal summary prints them all."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
