import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metasg import aggregation as A
from metasg import attacks as K
from metasg.data import ClientShard, TriggerSpec, gen_synthetic_dataset, poison_shard
from metasg.model import ModelSpec, init_params

SPEC = ModelSpec("linear", 6, 3)


def make_shard(seed=0, ratio=0.5, client_id=0):
    ds = gen_synthetic_dataset(6, 3, 20, 3.0, seed)
    shard = ClientShard(ds.X, ds.y, client_id)
    trig = TriggerSpec.patch(6, [5], 4.0, 0)
    return poison_shard(shard, trig, ratio, seed)


def test_ipm_cases():
    for u in K.ipm_craft(np.array([2.0, -4.0]), 0.5, 3):
        np.testing.assert_array_equal(u, [-1.0, 2.0])
    np.testing.assert_array_equal(K.ipm_craft(np.array([2.0, -4.0]), 0.0, 1)[0], [0.0, 0.0])
    with pytest.raises(ValueError):
        K.ipm_craft(np.ones(2), -1.0, 1)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8), st.floats(0.0, 20.0))
def test_ipm_anti_aligned(mean, eps):
    mu = np.array(mean)
    ip = float(K.ipm_craft(mu, eps, 1)[0] @ mu)
    assert ip <= 0.0
    if eps > 0 and np.any(mu != 0) and eps * float(mu @ mu) > 0:
        assert ip < 0.0


def test_lmp_cases():
    np.testing.assert_allclose(K.lmp_craft([np.array([1.0]), np.array([3.0])], 1.5, 2)[0], [0.5])
    same = [np.array([2.0, -1.0])] * 3
    np.testing.assert_array_equal(K.lmp_craft(same, 1.0, 1)[0], [2.0, -1.0])
    with pytest.raises(ValueError):
        K.lmp_craft([np.ones(2)], 1.0, 1)
    outs = K.lmp_craft([np.array([1.0]), np.array([3.0])], 1.0, 4)
    assert all(np.array_equal(o, outs[0]) for o in outs)


@given(st.integers(0, 10_000), st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_lmp_within_z_std_and_monotone(seed, z1, z2):
    E = np.random.default_rng(seed).normal(size=(5, 4))
    mu, sigma = E.mean(axis=0), E.std(axis=0)
    lo, hi = sorted((z1, z2))
    a = K.lmp_craft(list(E), lo, 1)[0]
    b = K.lmp_craft(list(E), hi, 1)[0]
    assert np.all(np.abs(a - mu) <= lo * sigma + 1e-12)
    assert np.all(np.abs(b - mu) >= np.abs(a - mu) - 1e-12)


def test_eb():
    u = np.array([0.6, 0.8])
    np.testing.assert_array_equal(K.eb_craft(u, 1.0), u)
    assert np.linalg.norm(K.eb_craft(u, 10.0)) == pytest.approx(10.0)
    np.testing.assert_allclose(A.norm_clip(K.eb_craft(u, 10.0), 1.0), A.norm_clip(10 * u, 1.0))
    with pytest.raises(ValueError):
        K.eb_craft(u, 0.5)


def test_backdoor_scaling_and_null_step():
    shard = make_shard()
    w = init_params(SPEC, 1)
    g1 = K.backdoor_craft(w, SPEC, shard, 1.0, 0.3, 3, 16, seed=5)
    g7 = K.backdoor_craft(w, SPEC, shard, 7.0, 0.3, 3, 16, seed=5)
    assert np.linalg.norm(g1) > 0
    np.testing.assert_allclose(g7, 7.0 * g1, rtol=1e-12)
    np.testing.assert_array_equal(K.backdoor_craft(w, SPEC, shard, 20.0, 0.0, 3, 16, seed=5), 0.0)


def test_backdoor_needs_triggered_samples():
    shard = make_shard(ratio=0.0)
    with pytest.raises(ValueError):
        K.backdoor_craft(init_params(SPEC, 0), SPEC, shard, 2.0, 0.1, 1, 8, seed=0)


def test_rl_untargeted_map():
    mu = np.array([3.0, -4.0])
    sd = np.array([1.0, 2.0])
    np.testing.assert_array_equal(K.rl_attack_apply([0, 0, 0], mu, sd, "RLUntargeted"), [0.0, 0.0])
    np.testing.assert_allclose(K.rl_attack_apply([1, 0, 0], mu, sd, "RLUntargeted"), K.ipm_craft(mu, 1.0, 1)[0])
    # a2 term: sigma * unit(mu) = [1, 2] * [0.6, -0.8]
    np.testing.assert_allclose(K.rl_attack_apply([0, 2, 0], mu, sd, "RLUntargeted"), [1.2, -3.2])
    np.testing.assert_allclose(K.rl_attack_apply([0, 0, 0.5], mu, sd, "RLUntargeted"), 0.5 * mu)
    with pytest.raises(ValueError):
        K.rl_attack_apply([np.nan, 0, 0], mu, sd, "RLUntargeted")


def test_rl_backdoor_map():
    g = np.array([3.0, 4.0])
    seen = []

    def upd(lam):
        seen.append(lam)
        return g

    np.testing.assert_allclose(K.rl_attack_apply([0, 0, 5.0], g, g, "RLBackdoor", upd), g)
    np.testing.assert_allclose(K.rl_attack_apply([1.0, 0.25, 0.0], g, g, "RLBackdoor", upd), 2 * g)
    capped = K.rl_attack_apply([9.0, 0.7, 2.0], g, g, "RLBackdoor", upd)
    assert np.linalg.norm(capped) == pytest.approx(2.0)
    assert seen == [0.0, 0.25, 0.7]


def ctx_for(shards, w=None):
    return K.RoundContext(init_params(SPEC, 2) if w is None else w, SPEC, shards, 0.3, 2, 16)


def test_craft_round_groups_identical():
    xi = K.AttackTypeSpec("BackdoorStatic", m1=2, m2=3, params={"companion": "LMP"})
    shards = {i: make_shard(i, client_id=i) for i in (0, 1, 2, 4)}
    out = K.craft_round(xi, ctx_for(shards), None, np.random.default_rng(0))
    assert set(out) == {0, 1, 2, 4}
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[2], out[4])
    assert not np.array_equal(out[0], out[2])


def test_craft_round_only_sampled():
    xi = K.AttackTypeSpec("IPM", m2=4)
    assert K.craft_round(xi, ctx_for({}), None, np.random.default_rng(0)) == {}
    out = K.craft_round(xi, ctx_for({3: make_shard(3, client_id=3)}), None, np.random.default_rng(0))
    assert set(out) == {3}


def test_craft_round_omniscient_ipm():
    xi = K.AttackTypeSpec("IPM", m2=2, params={"epsilon": 2.0})
    benign = np.random.default_rng(1).normal(size=(4, SPEC.n_params))
    ctx = ctx_for({0: make_shard(0), 1: make_shard(1, client_id=1)})
    ctx.benign_updates = benign
    out = K.craft_round(xi, ctx, None, np.random.default_rng(0), omniscient=True)
    np.testing.assert_allclose(out[0], -2.0 * benign.mean(axis=0))


def test_craft_round_deterministic():
    xi = K.AttackTypeSpec("EB", m2=2)
    shards = {0: make_shard(0), 1: make_shard(1, client_id=1)}
    a = K.craft_round(xi, ctx_for(shards), None, np.random.default_rng(9))
    b = K.craft_round(xi, ctx_for(shards), None, np.random.default_rng(9))
    for i in a:
        np.testing.assert_array_equal(a[i], b[i])


def test_attack_type_spec_validation_and_roundtrip():
    with pytest.raises(ValueError):
        K.AttackTypeSpec("IPM", m1=0, m2=0)
    with pytest.raises(ValueError):
        K.AttackTypeSpec("BackdoorStatic", m1=0, m2=3)
    with pytest.raises(ValueError):
        K.AttackTypeSpec("Nope", m2=1)
    xi = K.AttackTypeSpec("BackdoorStatic", m1=1, m2=4, params={"trigger": TriggerSpec.patch(6, [5], 4.0, 0)})
    assert xi.rho == pytest.approx(0.2)
    back = K.AttackTypeSpec.from_dict(xi.to_dict())
    assert back.kind == xi.kind and back.params["scale"] == 20.0
    np.testing.assert_array_equal(back.params["trigger"].mask, xi.params["trigger"].mask)
    assert K.AttackTypeSpec("RLUntargeted", m2=1).is_rl
