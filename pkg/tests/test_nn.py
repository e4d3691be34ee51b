import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drosurv.nn import autodiff as ad
from drosurv.nn.models import (ModelParams, ModelSpec, forward, forward_scalar, forward_simplex,
                               init_params, predict_simplex, preactivations)


def test_linear_forward():
    spec = ModelSpec.linear(2)
    assert forward_scalar([3.0, 1.0], spec, [1.0, -2.0]) == 1.0
    assert forward_scalar([3.0, 1.0], spec, [0.0, 0.0]) == 0.0


def test_mlp_all_ones_hand_propagation():
    spec = ModelSpec("mlp-scalar", 2, (2,), 1)
    theta = np.zeros(spec.n_params)
    for name, sl, _ in spec.layout():
        if name.startswith("w"):
            theta[sl] = 1.0
    assert forward_scalar([1.0, 1.0], spec, theta) == 4.0


def test_softmax_head_values():
    spec = ModelSpec.mlp_simplex(3, 4, hidden=(5,))
    theta = init_params(spec, 0)
    head = spec.layout()[-2:]
    for _, sl, _ in head:
        theta[sl] = 0.0
    np.testing.assert_allclose(forward_simplex([0.3, -1, 2], spec, theta), [0.25] * 4)
    p = ad.softmax(ad.Var(np.array([[np.log(2.0), 0.0]])), axis=1).value[0]
    np.testing.assert_allclose(p, [2 / 3, 1 / 3], rtol=1e-12)


def test_spec_invariants():
    with pytest.raises(ValueError):
        ModelSpec("linear", 3, (4,), 1)
    with pytest.raises(ValueError):
        ModelSpec("mlp-scalar", 3, (0,), 1)
    with pytest.raises(ValueError):
        forward(ModelSpec.linear(3), np.zeros(3), np.zeros((2, 4)))


def test_params_roundtrip(tmp_path):
    spec = ModelSpec.mlp_scalar(3, (4,))
    p = ModelParams(spec, init_params(spec, 1), psi=np.array([0.1, 0.2]), meta={"a": 1})
    p.save(tmp_path / "m.json")
    q = ModelParams.load(tmp_path / "m.json")
    np.testing.assert_array_equal(p.theta, q.theta)
    np.testing.assert_array_equal(p.psi, q.psi)
    assert q.spec == spec
    with pytest.raises(ValueError):
        ModelParams(spec, np.zeros(3))


def test_glorot_bounds_and_seed():
    spec = ModelSpec.mlp_scalar(6, (10,))
    t1, t2 = init_params(spec, 7), init_params(spec, 7)
    np.testing.assert_array_equal(t1, t2)
    name, sl, shape = spec.layout()[0]
    assert np.all(np.abs(t1[sl]) <= np.sqrt(6 / 16))
    assert np.all(t1[spec.layout()[1][1]] == 0)


def test_grad_simple_cases():
    _, g = ad.grad(lambda th: (th * th).sum(), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0])
    x = np.array([[0.5, -1.5, 2.0]])
    spec = ModelSpec.linear(3)
    _, g = ad.grad(lambda th: forward(spec, th, x).sum(), np.zeros(3))
    np.testing.assert_array_equal(g, x[0])


def test_relu_kink_subgradient_zero():
    _, g = ad.grad(lambda th: ad.relu(th).sum() + ad.abs_(th).sum(), np.array([0.0, 0.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_raises():
    with pytest.raises(ad.NumericError):
        ad.grad(lambda th: ad.log(th).sum(), np.array([-1.0]))


def test_logsumexp_masked_stable():
    x = ad.Var(np.array([[1000.0, 1001.0, -5.0]]))
    out = ad.logsumexp(x, axis=1, mask=np.array([[True, True, False]])).value
    np.testing.assert_allclose(out, [1001 + np.log1p(np.exp(-1))])


def _away_from_kinks(spec, theta, X):
    return all(np.all(np.abs(z) >= 1e-3) for z in preactivations(spec, theta, X))


def test_random_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 100:
        kind = ["linear", "mlp-scalar", "mlp-simplex"][checked % 3]
        d = int(rng.integers(1, 5))
        if kind == "linear":
            spec = ModelSpec.linear(d)
        elif kind == "mlp-scalar":
            spec = ModelSpec.mlp_scalar(d, (int(rng.integers(2, 6)),))
        else:
            spec = ModelSpec.mlp_simplex(d, int(rng.integers(2, 5)), (int(rng.integers(2, 6)),))
        theta = rng.standard_normal(spec.n_params)
        X = rng.standard_normal((int(rng.integers(1, 5)), d))
        if not _away_from_kinks(spec, theta, X):
            continue
        target = rng.standard_normal(forward(spec, theta, X).value.shape)
        if spec.kind == "mlp-simplex":
            fn = lambda th: (ad.log(predict_simplex(spec, th, X)) * target).sum()
        else:
            fn = lambda th: (ad.exp(forward(spec, th, X) * 0.3) * target).sum()
        assert ad.gradcheck(fn, theta) <= 1e-4
        checked += 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.integers(0, 10_000))
def test_simplex_sums_to_one(d, m, seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec.mlp_simplex(d, m, (3,))
    P = predict_simplex(spec, rng.standard_normal(spec.n_params) * 5, rng.standard_normal((5, d))).value
    assert np.all(P >= 0) and np.all(P <= 1)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
