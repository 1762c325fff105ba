import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metasg import model as M

SPECS = [M.ModelSpec("linear", 5, 3), M.ModelSpec("mlp", 4, 3, hidden=6)]


def ce_oracle(params, spec, X, y):
    """Scalar cross-entropy, one sample at a time, via math.log/exp."""
    total = 0.0
    for x, label in zip(X, y):
        z = M.logits(params, spec, x[None, :])[0].tolist()
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[label]
    return total / len(y)


def fd_grad(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.architecture)
def test_param_count_and_unpack(spec):
    w = np.arange(spec.n_params, dtype=float)
    parts = spec.unpack(w)
    assert sum(p.size for p in parts) == spec.n_params
    assert np.array_equal(w[spec.output_slice], parts[-2].ravel())
    with pytest.raises(ValueError):
        spec.unpack(np.zeros(spec.n_params + 1))


def test_uniform_model_loss_is_log_C():
    spec = M.ModelSpec("linear", 3, 4)
    X = np.random.default_rng(0).normal(size=(7, 3))
    assert M.loss_F(np.zeros(spec.n_params), spec, X, np.arange(7) % 4) == pytest.approx(math.log(4), abs=1e-15)


def test_confident_correct_model_has_vanishing_loss():
    spec = M.ModelSpec("linear", 2, 2)
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    W = 50.0 * np.eye(2)
    assert M.loss_F(np.concatenate([W.ravel(), [0, 0]]), spec, X, np.array([0, 1])) < 1e-20


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.architecture)
def test_loss_matches_scalar_oracle(spec):
    rng = np.random.default_rng(1)
    w = rng.normal(size=spec.n_params)
    X = rng.normal(size=(10, spec.dim))
    y = rng.integers(0, spec.n_classes, 10)
    assert M.loss_F(w, spec, X, y) == pytest.approx(ce_oracle(w, spec, X, y), abs=1e-9)


def test_empty_batch_rejected():
    spec = SPECS[0]
    with pytest.raises(ValueError):
        M.loss_F(np.zeros(spec.n_params), spec, np.zeros((0, 5)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        M.grad(np.zeros(spec.n_params), spec, np.zeros((0, 5)), np.zeros(0, dtype=int))


def test_F_prime_boundaries_and_midpoint():
    spec = SPECS[0]
    rng = np.random.default_rng(2)
    w = rng.normal(size=spec.n_params)
    clean = (rng.normal(size=(6, 5)), rng.integers(0, 3, 6))
    pois = (rng.normal(size=(4, 5)), np.zeros(4, dtype=int))
    a, b = M.loss_F(w, spec, *clean), M.loss_F(w, spec, *pois)
    assert M.loss_F_prime(w, spec, clean, pois, 1.0) == a
    assert M.loss_F_prime(w, spec, clean, pois, 0.0) == b
    assert M.loss_F_prime(w, spec, clean, pois, 0.5) == pytest.approx((a + b) / 2, abs=1e-15)
    with pytest.raises(ValueError):
        M.loss_F_prime(w, spec, clean, pois, 1.5)


@given(st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_F_prime_is_bounded_by_its_terms(lam, seed):
    spec = SPECS[0]
    rng = np.random.default_rng(seed)
    w = rng.normal(size=spec.n_params)
    clean = (rng.normal(size=(5, 5)), rng.integers(0, 3, 5))
    pois = (rng.normal(size=(5, 5)), rng.integers(0, 3, 5))
    a, b = M.loss_F(w, spec, *clean), M.loss_F(w, spec, *pois)
    v = M.loss_F_prime(w, spec, clean, pois, lam)
    assert min(a, b) - 1e-12 <= v <= max(a, b) + 1e-12
    assert v >= 0


def test_F_dprime_min_term_matches_enumeration():
    spec = M.ModelSpec("linear", 4, 3)
    rng = np.random.default_rng(3)
    w = rng.normal(size=spec.n_params)
    Xt = rng.normal(size=(8, 4))
    brute = min(M.loss_F(w, spec, Xt, np.full(8, c)) for c in range(3))
    val, arg = M.min_relabel_loss(w, spec, Xt, 3)
    assert val == pytest.approx(brute, abs=1e-12)
    assert M.loss_F(w, spec, Xt, np.full(8, arg)) == pytest.approx(brute, abs=1e-12)
    clean = (rng.normal(size=(5, 4)), rng.integers(0, 3, 5))
    lp = 0.3
    want = lp * M.loss_F(w, spec, *clean) - (1 - lp) * brute
    assert M.loss_F_dprime(w, spec, clean, Xt, lp, 3) == pytest.approx(want, abs=1e-12)


def test_F_dprime_boundaries():
    spec = M.ModelSpec("linear", 4, 3)
    rng = np.random.default_rng(4)
    w = rng.normal(size=spec.n_params)
    clean = (rng.normal(size=(5, 4)), rng.integers(0, 3, 5))
    Xt = rng.normal(size=(3, 4))
    assert M.loss_F_dprime(w, spec, clean, Xt, 1.0, 3) == M.loss_F(w, spec, *clean)
    # one candidate label: the min is the single relabeling
    single = M.loss_F(w, spec, Xt, np.zeros(3, dtype=int))
    assert M.loss_F_dprime(w, spec, clean, Xt, 0.0, 1) == pytest.approx(-single, abs=1e-15)
    with pytest.raises(ValueError):
        M.loss_F_dprime(w, spec, clean, np.zeros((0, 4)), 0.5, 3)
    with pytest.raises(ValueError):
        M.loss_F_dprime(w, spec, clean, Xt, -0.1, 3)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.architecture)
def test_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(5)
    for _ in range(20):
        w = rng.normal(size=spec.n_params)
        X = rng.normal(size=(6, spec.dim))
        y = rng.integers(0, spec.n_classes, 6)
        fd = fd_grad(lambda v: M.loss_F(v, spec, X, y), w)
        assert rel_err(M.grad(w, spec, X, y), fd) < 1e-4


def test_gradient_of_pair_is_mean_of_singles():
    spec = SPECS[1]
    rng = np.random.default_rng(6)
    w = rng.normal(size=spec.n_params)
    X = rng.normal(size=(2, spec.dim))
    y = np.array([0, 2])
    pair = M.grad(w, spec, X, y)
    singles = (M.grad(w, spec, X[:1], y[:1]) + M.grad(w, spec, X[1:], y[1:])) / 2
    assert np.allclose(pair, singles, atol=1e-14)


def test_gradient_vanishes_at_optimum_of_separable_problem():
    spec = M.ModelSpec("linear", 1, 2)
    X = np.array([[-1.0], [1.0]])
    y = np.array([0, 1])
    w = np.array([-30.0, 30.0, 0.0, 0.0])
    assert np.linalg.norm(M.grad(w, spec, X, y)) < 1e-6


def test_local_update_null_step_and_full_batch_step():
    spec = SPECS[0]
    rng = np.random.default_rng(7)
    w = rng.normal(size=spec.n_params)
    X, y = rng.normal(size=(9, 5)), rng.integers(0, 3, 9)
    assert np.array_equal(M.local_update(w, spec, X, y, 0.0, 3, 4, 0), np.zeros_like(w))
    g = M.local_update(w, spec, X, y, 0.3, 1, 9, 0)
    assert np.array_equal(g, 0.3 * M.grad(w, spec, X, y))


def test_local_update_is_deterministic_and_descends():
    spec = SPECS[1]
    rng = np.random.default_rng(8)
    w = M.init_params(spec, 0)
    X, y = rng.normal(size=(40, 4)), rng.integers(0, 3, 40)
    a = M.local_update(w, spec, X, y, 0.1, 5, 8, 123)
    b = M.local_update(w, spec, X, y, 0.1, 5, 8, 123)
    assert np.array_equal(a, b)
    assert M.loss_F(w - M.local_update(w, spec, X, y, 0.1, 20, 40, 0), spec, X, y) < M.loss_F(w, spec, X, y)


def test_mixed_update_endpoints():
    spec = SPECS[0]
    rng = np.random.default_rng(9)
    w = rng.normal(size=spec.n_params)
    clean = (rng.normal(size=(5, 5)), rng.integers(0, 3, 5))
    pois = (rng.normal(size=(5, 5)), np.zeros(5, dtype=int))
    g1 = M.local_update_mixed(w, spec, clean, pois, 1.0, 0.2, 1, 5, 0)
    assert np.allclose(g1, 0.2 * M.grad(w, spec, *clean), atol=1e-15)
    g0 = M.local_update_mixed(w, spec, clean, pois, 0.0, 0.2, 1, 5, 0)
    assert np.allclose(g0, 0.2 * M.grad(w, spec, *pois), atol=1e-15)


def test_accuracy_and_predict():
    spec = M.ModelSpec("linear", 1, 2)
    w = np.array([-1.0, 1.0, 0.0, 0.0])
    X = np.array([[-2.0], [3.0], [1.0]])
    assert M.predict(w, spec, X).tolist() == [0, 1, 1]
    assert M.accuracy(w, spec, X, np.array([0, 1, 0])) == pytest.approx(2 / 3)


def test_bad_model_specs():
    with pytest.raises(ValueError):
        M.ModelSpec("cnn", 2, 2)
    with pytest.raises(ValueError):
        M.ModelSpec("mlp", 2, 2, hidden=0)
    with pytest.raises(ValueError):
        M.ModelSpec("linear", 2, 1)
