"""Adversarial FL as a Bayesian Stackelberg Markov game.

One environment step is one FL round: the sampled benign clients train
locally, the sampled malicious clients submit the attacker's crafted
updates, the server aggregates under the defender's action and moves the
global model. The state carries the global model and the identity bits of
the sampled subset; the defender only ever observes the model (plus the
round fraction and the previous surrogate loss).

Random streams: client subsets depend on ``(seed, round)`` alone, so two
rollouts with the same seed see identical identity sequences whatever the
policies do.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import model as M
from .aggregation import CLASSICAL_RULES, DefenseAction, apply_defense, classical_aggregate, post_train
from .attacks import AttackTypeSpec, RoundContext, craft_round, malicious_groups
from .data import ClientShard, Dataset, TriggerSpec, apply_trigger_batch, gen_synthetic_dataset, poison_shard, split_non_iid
from .policy import PolicyParams, init_policy, policy_sample
from .seeding import child_seed, stream
from .trajectory import StepRecord, Trajectory, discounted_return

log = logging.getLogger(__name__)

__all__ = [
    "EnvConfig", "GlobalState", "FLGame", "env_reset", "env_step", "rollout",
    "sample_type", "discounted_return", "defender_bounds", "make_defender_policy", "make_attacker_policy",
]


class EnvConfig(BaseModel):
    """FL environment parameters.

    Population defaults follow the common MNIST-scale setting (100 clients, 10%
    sampling, 5 backdoor + 20 untargeted attackers, lambda = 0.5, one local
    iteration, minibatch 128); learning rate and data sizes are scaled to the
    synthetic task.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_clients: int = Field(100, ge=1)
    sampling_rate: float = Field(0.1, gt=0, le=1)
    horizon: int = Field(30, ge=1)
    gamma: float = Field(0.99, gt=0, lt=1)
    M1: int = Field(5, ge=0)
    M2: int = Field(20, ge=0)
    q: float = Field(0.0, ge=0, le=1)

    dim: int = Field(10, ge=1)
    n_classes: int = Field(4, ge=2)
    n_per_class: int = Field(300, ge=1)
    class_separation: float = Field(3.0, ge=0)
    n_informative: Optional[int] = 8
    surrogate_per_class: int = Field(40, ge=1)
    test_per_class: int = Field(200, ge=1)
    architecture: Literal["linear", "mlp"] = "linear"
    hidden: int = Field(0, ge=0)
    init_scale: float = Field(0.01, ge=0)

    lr: float = Field(0.5, ge=0)
    local_iters: int = Field(1, ge=1)
    batch_size: int = Field(128, ge=1)

    lam: float = Field(0.5, ge=0, le=1)
    lam_prime: float = Field(0.5, ge=0, le=1)
    poison_ratio: float = Field(0.5, ge=0, le=1)
    trigger_coords: list[int] = Field(default_factory=lambda: [8, 9])
    trigger_value: float = 4.0
    target_label: int = Field(0, ge=0)

    defense_mode: Literal["untargeted", "backdoor", "mixed"] = "untargeted"
    post_mode: Optional[Literal["clip", "prune"]] = None
    post_every_round: bool = False
    defender_reward: Literal["F", "F_dprime"] = "F"
    attacker_reward: Literal["objective", "literal"] = "objective"
    attacker_knowledge: Literal["own", "omniscient"] = "own"
    a_max: float = Field(10.0, gt=0)
    d_max: float = Field(1.0, gt=0)
    e_max: float = Field(10.0, gt=0)
    krum_f: Optional[int] = None
    clip_median_bound: float = Field(1.0, gt=0)

    data_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _consistent(self) -> "EnvConfig":
        if self.M1 + self.M2 >= self.n_clients:
            raise ValueError("M1 + M2 must be smaller than n_clients")
        if self.n_clients % self.n_classes:
            raise ValueError("n_clients must split evenly into n_classes groups")
        if self.architecture == "mlp" and self.hidden < 1:
            raise ValueError("mlp architecture needs hidden >= 1")
        if any(not 0 <= c < self.dim for c in self.trigger_coords):
            raise ValueError("trigger coordinates must lie in [0, dim)")
        if self.target_label >= self.n_classes:
            raise ValueError("target_label must be < n_classes")
        if self.n_informative is not None and not 1 <= self.n_informative <= self.dim:
            raise ValueError("n_informative must lie in [1, dim]")
        return self

    @property
    def model_spec(self) -> M.ModelSpec:
        return M.ModelSpec(self.architecture, self.dim, self.n_classes, self.hidden)

    @property
    def n_sampled(self) -> int:
        return max(1, int(round(self.sampling_rate * self.n_clients)))

    def trigger(self) -> TriggerSpec:
        return TriggerSpec.patch(self.dim, self.trigger_coords, self.trigger_value, self.target_label)


def defender_bounds(cfg: EnvConfig) -> list[tuple[float, float]]:
    """Squash ranges for the defender's action vector in ``cfg.defense_mode``."""
    untargeted = [(0.0, 0.5), (0.0, cfg.a_max), (-1.0, 1.0)]
    post = (0.0, cfg.e_max) if cfg.post_mode == "clip" else (0.0, 1.0)
    backdoor = [(0.0, cfg.d_max), (0.0, cfg.a_max), post]
    if cfg.defense_mode == "untargeted":
        return untargeted
    if cfg.defense_mode == "backdoor":
        return backdoor
    return untargeted + backdoor


@dataclass
class GlobalState:
    w_g: np.ndarray
    identity: np.ndarray
    round: int
    sampled_ids: np.ndarray
    seed: int
    prev_loss: float = 0.0
    history: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_malicious(self) -> int:
        return int(self.identity.sum())


Defense = Union[PolicyParams, DefenseAction, str]


class FLGame:
    """The FL environment for one :class:`EnvConfig` (datasets are built once)."""

    def __init__(self, config: EnvConfig):
        self.config = cfg = config
        self.spec = cfg.model_spec
        common = dict(n_informative=cfg.n_informative)
        seed = cfg.data_seed
        train = gen_synthetic_dataset(cfg.dim, cfg.n_classes, cfg.n_per_class, cfg.class_separation,
                                      child_seed(seed, "data"), sample_seed=stream(seed, "data", 1), **common)
        self.surrogate = gen_synthetic_dataset(cfg.dim, cfg.n_classes, cfg.surrogate_per_class, cfg.class_separation,
                                               child_seed(seed, "data"), sample_seed=stream(seed, "data", 2), **common)
        self.test = gen_synthetic_dataset(cfg.dim, cfg.n_classes, cfg.test_per_class, cfg.class_separation,
                                          child_seed(seed, "data"), sample_seed=stream(seed, "data", 3), **common)
        self.train = train
        self.shards = split_non_iid(train, cfg.n_clients, cfg.n_classes, cfg.q, stream(seed, "split"))
        self._poisoned: dict[Any, dict[int, ClientShard]] = {}
        self._trigger_sets: dict[Any, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    @property
    def gamma(self) -> float:
        return self.config.gamma

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def defender_obs_dim(self) -> int:
        return self.spec.n_params + 2

    @property
    def attacker_obs_dim(self) -> int:
        return self.spec.n_params + 2

    # -- helpers ---------------------------------------------------------

    def trigger_for(self, xi: AttackTypeSpec | None) -> TriggerSpec:
        if xi is not None and isinstance(xi.params.get("trigger"), TriggerSpec):
            return xi.params["trigger"]
        return self.config.trigger()

    def _trigger_key(self, trigger: TriggerSpec) -> tuple:
        return (trigger.mask.tobytes(), trigger.pattern.tobytes(), trigger.target_label)

    def _triggered(self, trigger: TriggerSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Triggered surrogate inputs, triggered test inputs (non-target labels only)."""
        key = self._trigger_key(trigger)
        if key not in self._trigger_sets:
            keep_s = self.surrogate.y != trigger.target_label
            keep_t = self.test.y != trigger.target_label
            self._trigger_sets[key] = (
                apply_trigger_batch(self.surrogate.X[keep_s], trigger),
                apply_trigger_batch(self.test.X[keep_t], trigger),
                np.full(int(keep_s.sum()), trigger.target_label),
            )
        return self._trigger_sets[key]

    def client_shard(self, client: int, xi: AttackTypeSpec | None) -> ClientShard:
        if xi is None or client >= xi.m1:
            return self.shards[client]
        trigger = self.trigger_for(xi)
        key = (self._trigger_key(trigger), xi.m1)
        if key not in self._poisoned:
            self._poisoned[key] = {
                i: poison_shard(self.shards[i], trigger, self.config.poison_ratio, stream(self.config.data_seed, "attack", i))
                for i in range(xi.m1)
            }
        return self._poisoned[key][client]

    def sample_clients(self, seed: int, round_: int, xi: AttackTypeSpec | None) -> tuple[np.ndarray, np.ndarray]:
        rng = stream(seed, "sampling", round_)
        ids = np.sort(rng.choice(self.config.n_clients, size=self.config.n_sampled, replace=False))
        n_mal = 0 if xi is None else xi.m1 + xi.m2
        return ids, ids < n_mal

    def defender_obs(self, state: GlobalState) -> np.ndarray:
        return np.concatenate([state.w_g, [state.round / self.horizon, state.prev_loss]])

    def attacker_obs(self, state: GlobalState) -> np.ndarray:
        frac = state.n_malicious / max(1, state.identity.size)
        return np.concatenate([state.w_g, [state.round / self.horizon, frac]])

    def surrogate_loss(self, w: np.ndarray) -> float:
        return M.loss_F(w, self.spec, self.surrogate.X, self.surrogate.y)

    # -- game API --------------------------------------------------------

    def reset(self, xi: AttackTypeSpec | None, seed: int) -> GlobalState:
        w0 = M.init_params(self.spec, stream(seed, "init"), self.config.init_scale)
        ids, identity = self.sample_clients(seed, 0, xi)
        return GlobalState(w0, identity, 0, ids, seed, prev_loss=self.surrogate_loss(w0))

    def craft(self, state: GlobalState, xi: AttackTypeSpec | None, attack_action: np.ndarray | None,
              benign_updates: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Attack action (updates of sampled malicious clients) for this round."""
        if xi is None or not state.identity.any():
            return {}
        cfg = self.config
        mal = [int(i) for i in state.sampled_ids[state.identity]]
        ctx = RoundContext(state.w_g, self.spec, {i: self.client_shard(i, xi) for i in mal},
                           cfg.lr, cfg.local_iters, cfg.batch_size, benign_updates)
        rng = stream(state.seed, "attack", state.round)
        return craft_round(xi, ctx, attack_action, rng, omniscient=cfg.attacker_knowledge == "omniscient")

    def benign_updates(self, state: GlobalState) -> dict[int, np.ndarray]:
        """Honest local updates of the sampled benign clients; an empty shard sends a zero update."""
        cfg = self.config
        out = {}
        for i, bad in zip(state.sampled_ids, state.identity):
            if bad:
                continue
            shard = self.shards[int(i)]
            if len(shard) == 0:
                out[int(i)] = np.zeros_like(state.w_g)
                continue
            out[int(i)] = M.local_update(state.w_g, self.spec, shard.X, shard.y, cfg.lr, cfg.local_iters,
                                         cfg.batch_size, stream(state.seed, "sgd", state.round, int(i)))
        return out

    def aggregate(self, state: GlobalState, defense: DefenseAction | str, ids: list[int], U: np.ndarray) -> np.ndarray:
        cfg = self.config
        if isinstance(defense, str):
            f = cfg.krum_f if cfg.krum_f is not None else int(state.identity.sum())
            return classical_aggregate(defense, U, f_count=f, norm_bound=cfg.clip_median_bound)
        hist = np.array([state.history[i] for i in ids]) if defense.cos_threshold < 1.0 else None
        return apply_defense(defense, U, hist, stream(state.seed, "noise", state.round))

    def step(
        self,
        state: GlobalState,
        defense: DefenseAction | str,
        attack: dict[int, np.ndarray],
        xi: AttackTypeSpec | None,
        *,
        benign: dict[int, np.ndarray] | None = None,
        post: DefenseAction | None = None,
        diagnostics: bool = True,
    ) -> tuple[GlobalState, float, float, dict[str, float]]:
        """One FL round. ``defense`` is an action or a classical rule name; ``post`` carries h(.) for rule names."""
        cfg = self.config
        if state.round >= cfg.horizon:
            raise ValueError(f"round {state.round} is past the horizon {cfg.horizon}")
        sampled_mal = {int(i) for i in state.sampled_ids[state.identity]}
        if not set(attack) <= sampled_mal:
            raise ValueError("attack action names clients that are not sampled malicious clients")
        benign = self.benign_updates(state) if benign is None else benign
        ids, rows = [], []
        for i in state.sampled_ids:
            i = int(i)
            u = attack.get(i) if i in sampled_mal else benign[i]
            if u is None:  # sampled malicious client the attacker left silent
                continue
            u = np.asarray(u, dtype=float)
            if u.shape != state.w_g.shape:
                raise ValueError(f"update of client {i} has shape {u.shape}, model has {state.w_g.shape}")
            if not np.isfinite(u).all():
                raise ValueError(f"client {i} sent a non-finite update")
            ids.append(i)
            rows.append(u)
        U = np.array(rows)
        history = dict(state.history)
        for i, u in zip(ids, U):
            history[i] = history.get(i, 0.0) + u
        tmp = GlobalState(state.w_g, state.identity, state.round, state.sampled_ids, state.seed, state.prev_loss, history)
        agg = self.aggregate(tmp, defense, ids, U)
        w_next = state.w_g - agg
        final = state.round == cfg.horizon - 1
        post_action = defense if isinstance(defense, DefenseAction) else post
        w_hat = w_next
        if post_action is not None and post_action.post is not None and (final or cfg.post_every_round):
            w_hat = post_train(post_action, w_next, self.spec)
        if not np.isfinite(w_hat).all():
            raise FloatingPointError("global model diverged to non-finite values")

        loss = self.surrogate_loss(w_hat)
        trigger = self.trigger_for(xi)
        X_trig_s, X_trig_t, y_trig_s = self._triggered(trigger)
        if cfg.defender_reward == "F":
            r_D = -loss
        else:
            r_D = -M.loss_F_dprime(w_hat, self.spec, (self.surrogate.X, self.surrogate.y), X_trig_s,
                                   cfg.lam_prime, cfg.n_classes)
        r_A = 0.0
        if state.identity.any():
            rho = xi.rho
            f_prime = M.loss_F_prime(w_hat, self.spec, (self.surrogate.X, self.surrogate.y),
                                     (X_trig_s, y_trig_s), cfg.lam) if rho > 0 else 0.0
            if cfg.attacker_reward == "objective":
                r_A = -rho * f_prime + (1.0 - rho) * loss
            else:
                r_A = rho * f_prime - (1.0 - rho) * loss

        info: dict[str, float] = {"surrogate_loss": loss, "n_malicious": float(state.identity.sum())}
        if diagnostics:
            info["true_loss"] = M.loss_F(w_hat, self.spec, self.train.X, self.train.y)
            info["main_accuracy"] = M.accuracy(w_hat, self.spec, self.test.X, self.test.y)
            preds = M.predict(w_hat, self.spec, X_trig_t)
            info["backdoor_accuracy"] = float((preds == trigger.target_label).mean()) if preds.size else 0.0

        nxt_round = state.round + 1
        ids_next, identity_next = self.sample_clients(state.seed, nxt_round, xi)
        carried = w_hat if (cfg.post_every_round or final) else w_next
        nxt = GlobalState(carried, identity_next, nxt_round, ids_next, state.seed, loss, history)
        return nxt, float(r_D), float(r_A), info

    def rollout(
        self,
        defense: Defense,
        phi: PolicyParams | None,
        xi: AttackTypeSpec | None,
        seed: int,
        horizon: int | None = None,
        *,
        diagnostics: bool = False,
        post: DefenseAction | None = None,
        stop_after: int | None = None,
    ) -> Trajectory:
        """Play one episode. ``defense`` is a defender policy, a fixed action or a classical rule name."""
        cfg = self.config
        H = cfg.horizon if horizon is None else horizon
        game = self if H == cfg.horizon else FLGame.__new__(FLGame)
        if game is not self:
            game.__dict__.update(self.__dict__)
            game.config = cfg.model_copy(update={"horizon": H})
        rng_D = stream(seed, "policy_D")
        rng_A = stream(seed, "policy_A")
        state = game.reset(xi, seed)
        traj = Trajectory()
        n_steps = H if stop_after is None else min(H, stop_after)
        for _ in range(n_steps):
            state, rec = game.play_round(state, defense, phi, xi, rng_D, rng_A, diagnostics=diagnostics, post=post)
            traj.steps.append(rec)
        return traj

    def play_round(
        self,
        state: GlobalState,
        defense: Defense,
        phi: PolicyParams | None,
        xi: AttackTypeSpec | None,
        rng_D: np.random.Generator,
        rng_A: np.random.Generator,
        *,
        diagnostics: bool = False,
        post: DefenseAction | None = None,
    ) -> tuple[GlobalState, StepRecord]:
        """Both players act from ``state`` and one round is executed."""
        cfg = self.config
        obs_D = self.defender_obs(state)
        if isinstance(defense, PolicyParams):
            vec, lp_D = policy_sample(defense, obs_D, rng_D)
            action: DefenseAction | str = DefenseAction.from_vector(cfg.defense_mode, vec, cfg.post_mode)
        else:
            action, lp_D = defense, 0.0
            vec = np.array([]) if isinstance(defense, str) else np.array(action_vector(defense, cfg))
        obs_A, vec_A, lp_A = None, None, None
        if xi is not None and xi.is_rl:
            policy_A = phi if phi is not None else xi.policy
            if policy_A is None:
                raise ValueError(f"RL attack type {xi.name!r} has no attacker policy")
            obs_A = self.attacker_obs(state)
            vec_A, lp_A = policy_sample(policy_A, obs_A, rng_A)
        benign = self.benign_updates(state)
        omni = np.array(list(benign.values())) if benign else None
        attack = self.craft(state, xi, vec_A, omni)
        rnd = state.round
        state, r_D, r_A, info = self.step(state, action, attack, xi, benign=benign, post=post, diagnostics=diagnostics)
        return state, StepRecord(rnd, obs_D, np.asarray(vec, dtype=float), obs_A, vec_A, r_D, r_A, lp_D, lp_A, info)


def action_vector(action: DefenseAction, cfg: EnvConfig) -> list[float]:
    """Inverse of :meth:`DefenseAction.from_vector` for logging fixed actions."""
    ef = action.clip_range if cfg.post_mode == "clip" else action.prune_rate
    ef = 0.0 if ef is None else ef
    un = [action.trim, action.norm_bound, action.cos_threshold]
    bd = [action.noise_var, action.bd_norm_bound, ef]
    return {"untargeted": un, "backdoor": bd, "mixed": un + bd}[action.mode]


def env_reset(game: FLGame, xi: AttackTypeSpec | None, seed: int) -> GlobalState:
    return game.reset(xi, seed)


def env_step(game: FLGame, state: GlobalState, a_D: DefenseAction | str, a_A: dict[int, np.ndarray],
             xi: AttackTypeSpec | None, **kw: Any) -> tuple[GlobalState, float, float, dict[str, float]]:
    return game.step(state, a_D, a_A, xi, **kw)


def rollout(game, theta, phi, xi, seed: int, **kw: Any) -> Trajectory:
    """Module-level alias for ``game.rollout`` (works for any game object)."""
    return game.rollout(theta, phi, xi, seed, **kw)


def sample_type(Q, seed: int | np.random.Generator) -> int:
    """Categorical draw of a type index from probability vector ``Q``."""
    p = np.asarray(Q, dtype=float)
    if p.ndim != 1 or p.size == 0 or (p < 0).any() or not np.isclose(p.sum(), 1.0):
        raise ValueError("Q must be a probability vector")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return int(rng.choice(p.size, p=p / p.sum()))


def make_defender_policy(game: FLGame, seed: int = 0, **kw: Any) -> PolicyParams:
    return init_policy(game.defender_obs_dim, defender_bounds(game.config), seed, role="defender", **kw)


def make_attacker_policy(game: FLGame, kind: str, seed: int = 0, **kw: Any) -> PolicyParams:
    from .attacks import RL_ACTION_BOUNDS

    return init_policy(game.attacker_obs_dim, RL_ACTION_BOUNDS[kind], seed, role=f"attacker:{kind}", **kw)
