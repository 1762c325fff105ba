import math

import numpy as np
import pytest
from pydantic import ValidationError

from metasg import model as M
from metasg.aggregation import DefenseAction
from metasg.attacks import AttackTypeSpec
from metasg.env import (
    EnvConfig, FLGame, defender_bounds, env_reset, env_step, make_attacker_policy, make_defender_policy,
    rollout, sample_type,
)
from metasg.experiments import ipm_fixture
from metasg.trajectory import StepRecord, Trajectory, discounted_return


def small(**kw):
    base = dict(n_clients=20, sampling_rate=0.25, horizon=4, M1=1, M2=4, dim=6, n_classes=2, n_per_class=60,
                n_informative=4, trigger_coords=[5], surrogate_per_class=20, test_per_class=40, batch_size=16)
    base.update(kw)
    return EnvConfig(**base)


@pytest.fixture(scope="module")
def game():
    return FLGame(small())


IPM = AttackTypeSpec("IPM", m2=4)


def test_config_validation():
    with pytest.raises(ValidationError):
        EnvConfig(n_clients=10, M1=5, M2=5, n_classes=2)
    with pytest.raises(ValidationError):
        EnvConfig(n_clients=10, n_classes=3, M1=0, M2=1)
    with pytest.raises(ValidationError):
        EnvConfig(gamma=1.0)
    with pytest.raises(ValidationError):
        EnvConfig(bogus=1)
    with pytest.raises(ValidationError):
        EnvConfig(trigger_coords=[50])
    assert EnvConfig().n_sampled == 10


def test_full_sampling_identity():
    g = FLGame(small(sampling_rate=1.0))
    xi = AttackTypeSpec("BackdoorStatic", m1=2, m2=3)
    st = g.reset(xi, 0)
    assert st.identity.sum() == 5 and st.identity.size == 20
    assert g.reset(None, 0).identity.sum() == 0


def test_reset_deterministic(game):
    a, b = env_reset(game, IPM, 3), env_reset(game, IPM, 3)
    np.testing.assert_array_equal(a.w_g, b.w_g)
    np.testing.assert_array_equal(a.sampled_ids, b.sampled_ids)
    assert a.round == 0 and a.prev_loss == pytest.approx(game.surrogate_loss(a.w_g))


def test_identity_depends_only_on_seed(game):
    th_a = make_defender_policy(game, 0)
    th_b = make_defender_policy(game, 1, weight_scale=0.3)
    ids = []
    for theta in (th_a, th_b, DefenseAction.open(), "median"):
        st = game.reset(IPM, 11)
        seq = []
        rng = np.random.default_rng(0)
        for _ in range(game.horizon):
            seq.append(st.identity.copy())
            st, _ = game.play_round(st, theta, None, IPM, rng, rng)
        ids.append(np.array(seq))
    for other in ids[1:]:
        np.testing.assert_array_equal(ids[0], other)


def find_state(game, xi, want_malicious):
    for seed in range(200):
        st = game.reset(xi, seed)
        if bool(st.identity.any()) == want_malicious:
            return st
    raise AssertionError("no suitable seed")


def test_r_A_zero_without_sampled_attacker(game):
    st = find_state(game, IPM, False)
    _, r_D, r_A, _ = game.step(st, DefenseAction.open(), {}, IPM)
    assert r_A == 0.0
    assert r_D <= 0.0


def test_r_A_mixing():
    assert AttackTypeSpec("BackdoorStatic", m1=5, m2=20).rho == pytest.approx(0.2)
    g = FLGame(small(sampling_rate=1.0))
    xi = AttackTypeSpec("BackdoorStatic", m1=1, m2=4)
    st = g.reset(xi, 0)
    attack = g.craft(st, xi, None)
    _, r_D, r_A, info = g.step(st, DefenseAction.open(), attack, xi)
    # rebuild the reward from its parts
    w = st.w_g - np.mean([*(g.benign_updates(st).values()), *attack.values()], axis=0)
    xs, _, ys = g._triggered(g.trigger_for(xi))
    F = M.loss_F(w, g.spec, g.surrogate.X, g.surrogate.y)
    Fp = M.loss_F_prime(w, g.spec, (g.surrogate.X, g.surrogate.y), (xs, ys), g.config.lam)
    assert r_D == pytest.approx(-F, rel=1e-9)
    assert r_A == pytest.approx(-0.2 * Fp + 0.8 * F, rel=1e-9)
    lit = FLGame(small(sampling_rate=1.0, attacker_reward="literal"))
    _, _, r_lit, _ = lit.step(lit.reset(xi, 0), DefenseAction.open(), attack, xi)
    assert r_lit == pytest.approx(0.2 * Fp - 0.8 * F, rel=1e-9)


def test_open_defense_is_fedavg(game):
    st = find_state(game, IPM, False)
    benign = game.benign_updates(st)
    nxt, _, _, _ = game.step(st, DefenseAction.open(), {}, IPM, benign=benign)
    want = st.w_g - np.mean(list(benign.values()), axis=0)
    np.testing.assert_allclose(nxt.w_g, want, atol=1e-14)
    assert nxt.round == 1


def test_step_errors(game):
    st = find_state(game, IPM, True)
    bad = int(st.sampled_ids[~st.identity][0])
    with pytest.raises(ValueError):
        game.step(st, DefenseAction.open(), {bad: np.zeros_like(st.w_g)}, IPM)
    mal = int(st.sampled_ids[st.identity][0])
    with pytest.raises(ValueError):
        game.step(st, DefenseAction.open(), {mal: np.zeros(3)}, IPM)
    last = type(st)(st.w_g, st.identity, game.horizon, st.sampled_ids, st.seed)
    with pytest.raises(ValueError):
        game.step(last, DefenseAction.open(), {}, IPM)


def test_post_train_only_at_last_round():
    g = FLGame(small(horizon=3, defense_mode="backdoor", post_mode="prune"))
    action = DefenseAction(mode="backdoor", post="prune", prune_rate=1.0)
    traj = g.rollout(action, None, None, 0)
    sl = g.spec.output_slice
    # the last record's reward reflects a fully pruned output layer
    st = g.reset(None, 0)
    for _ in range(2):
        st, _, _, _ = g.step(st, action, {}, None)
    assert np.any(st.w_g[sl] != 0)
    st, r_D, _, _ = g.step(st, action, {}, None)
    np.testing.assert_array_equal(st.w_g[sl], 0.0)
    assert traj.steps[-1].r_D == pytest.approx(r_D)


def test_rollout_lengths_and_obs(game):
    theta = make_defender_policy(game, 0)
    traj = rollout(game, theta, None, IPM, 0, horizon=1)
    assert len(traj) == 1
    traj = game.rollout(theta, None, IPM, 0)
    assert len(traj) == game.horizon
    for s in traj.steps:
        assert s.defender_obs.shape == (game.spec.n_params + 2,)
        assert s.r_D <= 0 and math.isfinite(s.r_A)
        assert s.attacker_obs is None


def test_rollout_deterministic(game):
    theta = make_defender_policy(game, 0)
    xi = AttackTypeSpec("RLUntargeted", m2=4)
    phi = make_attacker_policy(game, "RLUntargeted", 1)
    a = game.rollout(theta, phi, xi, 5)
    b = game.rollout(theta, phi, xi, 5)
    for x, y in zip(a.steps, b.steps):
        np.testing.assert_array_equal(x.defender_action, y.defender_action)
        assert x.r_D == y.r_D and x.r_A == y.r_A
    assert any(s.attacker_obs is not None for s in a.steps)


def test_benign_training_lowers_loss():
    # recorded on the 20-client fixture without attackers, seed 0, 30 rounds
    g = FLGame(ipm_fixture(0, horizon=30))
    traj = g.rollout(DefenseAction.open(), None, None, 0, diagnostics=True)
    r = traj.rewards("D")
    assert r[0] == pytest.approx(-0.7229810125073717, rel=1e-9)
    assert r[-1] == pytest.approx(-0.2166787780182819, rel=1e-9)
    assert r[-5:].mean() > r[:5].mean()
    assert traj.steps[-1].info["main_accuracy"] == pytest.approx(0.9275)


def test_empty_shard_sends_zero():
    g = FLGame(small(M1=0, M2=0))
    st = g.reset(None, 0)
    i = int(st.sampled_ids[0])
    g.shards[i] = type(g.shards[i])(g.shards[i].X[:0], g.shards[i].y[:0], i)
    np.testing.assert_array_equal(g.benign_updates(st)[i], 0.0)


def test_defender_bounds():
    assert defender_bounds(small()) == [(0.0, 0.5), (0.0, 10.0), (-1.0, 1.0)]
    assert len(defender_bounds(small(defense_mode="mixed", post_mode="clip"))) == 6


def test_sample_type():
    assert all(sample_type([0.0, 1.0], s) == 1 for s in range(50))
    rng = np.random.default_rng(0)
    n = 10_000
    hits = sum(sample_type([0.5, 0.5], rng) for _ in range(n))
    assert abs(hits - n / 2) <= 3 * math.sqrt(n * 0.25)
    with pytest.raises(ValueError):
        sample_type([0.3, 0.3], 0)


def step(r_D, r_A=0.0):
    return StepRecord(0, np.zeros(1), np.zeros(1), None, None, r_D, r_A, 0.0, None)


def test_discounted_return():
    assert discounted_return(Trajectory([step(0.0), step(0.0)]), 0.9, "D") == 0.0
    t = Trajectory([step(-1.0), step(-1.0)])
    assert discounted_return(t, 0.5, "D") == pytest.approx(-0.75)
    t2 = Trajectory([step(-2.0), step(-2.0)])
    assert discounted_return(t2, 0.5, "D") == pytest.approx(2 * discounted_return(t, 0.5, "D"))
    with pytest.raises(ValueError):
        discounted_return(t, 1.0, "D")


def test_env_step_alias(game):
    st = game.reset(None, 1)
    a = env_step(game, st, "mean", {}, None)
    b = game.step(st, "mean", {}, None)
    np.testing.assert_array_equal(a[0].w_g, b[0].w_g)
