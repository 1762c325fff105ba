import numpy as np
import pytest

from metasg.games import BilinearGame, GaussianBandit, QuadraticTaskGame, TwoTypeStackelbergGame
from metasg.policy import PolicyParams, init_policy


def fd(f, v, h=1e-6):
    out = np.zeros_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        out[i] = (f(v + e) - f(v - e)) / (2 * h)
    return out


def test_bandit_exact_gradient_is_derivative():
    g = GaussianBandit()
    p = g.make_policy(0, weight_scale=0.4, log_std=-0.3)
    num = fd(lambda v: g.expected_return(p.with_vector(v)), p.vector())
    np.testing.assert_allclose(g.exact_gradient(p), num, rtol=1e-6, atol=1e-8)


def test_bandit_expected_return_monte_carlo():
    g = GaussianBandit()
    p = g.make_policy(0, weight_scale=0.4)
    rets = [g.rollout(p, None, None, s).steps[0].r_D for s in range(4000)]
    se = np.std(rets) / np.sqrt(len(rets))
    assert abs(g.gamma * np.mean(rets) - g.expected_return(p)) <= 4 * g.gamma * se


def test_quadratic_gradient_and_optimum():
    g = QuadraticTaskGame()
    p = PolicyParams(W=[[0.2]], b=[0.1], log_std=[-1.0])
    for xi in (0, 1):
        num = fd(lambda v: g.expected_return(p.with_vector(v), xi), p.vector())
        np.testing.assert_allclose(g.exact_gradient(p, None, xi), num, rtol=1e-6, atol=1e-8)
    at_target = PolicyParams(W=[[0.0]], b=[1.0], log_std=[-1.0])
    assert g.exact_gradient(at_target, None, 1)[:2] == pytest.approx([0.0, 0.0])


def test_two_type_payoffs_and_gradients():
    g = TwoTypeStackelbergGame()
    r_D, r_A = g.payoff(np.array([0.5]), np.array([1.0]), 1, None)
    assert r_D == pytest.approx(-(0.25 + 0.5))
    assert r_A == pytest.approx(-(1.0 + 0.5) ** 2)
    th = g.defender_policy(0, squashed=False, weight_scale=0.3)
    ph = g.attacker_policy(1, squashed=False, weight_scale=0.3)
    s = g.discount_sum()
    # J_A = -s((my - (mx - mu))^2 + vy + vx), differentiate in phi
    def J_A(v):
        q = ph.with_vector(v)
        mx, my = th.W[0, 0] + th.b[0], q.W[0, 0] + q.b[0]
        return -s * ((my - (mx - g.mus[0])) ** 2 + np.exp(2 * q.log_std[0]) + np.exp(2 * th.log_std[0]))
    np.testing.assert_allclose(g.exact_gradient(th, ph, 0, "A"), fd(J_A, ph.vector()), rtol=1e-6, atol=1e-8)
    with pytest.raises(ValueError):
        g.exact_gradient(g.defender_policy(0), ph, 0)


def test_bilinear_best_response_direction():
    g = BilinearGame()
    th = PolicyParams(W=[[0.0]], b=[2.0], log_std=[-3.0])
    ph = PolicyParams(W=[[0.0]], b=[0.0], log_std=[-1.0])
    grad = g.exact_gradient(th, ph, None)
    assert grad[1] > 0  # pushes y toward x = 2


def test_rollout_shapes_and_determinism():
    g = TwoTypeStackelbergGame(horizon=3)
    th, ph = g.defender_policy(0), g.attacker_policy(1)
    a = g.rollout(th, ph, 0, 9)
    b = g.rollout(th, ph, 0, 9)
    assert len(a) == 3
    assert [s.r_D for s in a.steps] == [s.r_D for s in b.steps]
    with pytest.raises(ValueError):
        g.rollout(th, None, 0, 0)
    assert all(-3 < s.defender_action[0] < 3 for s in a.steps)
