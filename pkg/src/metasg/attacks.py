"""Attacker behaviours: static crafting rules and the 3-d RL action map.

Static kinds: ``IPM`` (inner product manipulation), ``LMP`` (local model
poisoning, directed deviation), ``EB`` (explicit boosting of a label-flip
update) and ``BackdoorStatic`` (model replacement). Adaptive kinds
``RLUntargeted`` / ``RLBackdoor`` read a 3-vector from an attacker policy.

Clients ``[0, m1)`` are the backdoor group, ``[m1, m1 + m2)`` the untargeted
group. The type's ``kind`` drives its own group; if the other group is
non-empty it runs the static companion (``BackdoorStatic`` or
``params["companion"]``, default ``IPM``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .data import ClientShard, TriggerSpec
from .model import ModelSpec, local_update, local_update_mixed

UNTARGETED_KINDS = ("IPM", "LMP", "EB", "RLUntargeted")
BACKDOOR_KINDS = ("BackdoorStatic", "RLBackdoor")
KINDS = UNTARGETED_KINDS + BACKDOOR_KINDS
RL_KINDS = ("RLUntargeted", "RLBackdoor")

DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "IPM": {"epsilon": 0.5},
    "LMP": {"z": 1.5},
    "EB": {"boost": 10.0},
    "BackdoorStatic": {"scale": 20.0},
    "RLUntargeted": {},
    "RLBackdoor": {},
}

# attacker policy bounds per RL kind (low, high) for the squashed 3-d action
RL_ACTION_BOUNDS = {
    "RLUntargeted": [(0.0, 10.0), (-3.0, 3.0), (-1.0, 1.0)],
    "RLBackdoor": [(0.0, 30.0), (0.0, 1.0), (0.0, 10.0)],
}


@dataclass
class AttackTypeSpec:
    """One private attacker type. ``policy`` is a :class:`~metasg.policy.PolicyParams` for RL kinds."""

    kind: str
    m1: int = 0
    m2: int = 0
    params: dict[str, Any] = field(default_factory=dict)
    name: str = ""
    policy: Any = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.m1 < 0 or self.m2 < 0 or self.m1 + self.m2 < 1:
            raise ValueError("need m1, m2 >= 0 and m1 + m2 >= 1")
        if self.kind in BACKDOOR_KINDS and self.m1 == 0:
            raise ValueError(f"{self.kind} needs at least one backdoor client (m1 >= 1)")
        if self.kind in UNTARGETED_KINDS and self.m2 == 0:
            raise ValueError(f"{self.kind} needs at least one untargeted client (m2 >= 1)")
        merged = dict(DEFAULT_PARAMS[self.kind])
        merged.update(self.params)
        self.params = merged
        if not self.name:
            self.name = self.kind

    @property
    def is_rl(self) -> bool:
        return self.kind in RL_KINDS

    @property
    def rho(self) -> float:
        return self.m1 / (self.m1 + self.m2)

    def to_dict(self) -> dict[str, Any]:
        params = {k: v for k, v in self.params.items() if k != "trigger"}
        if "trigger" in self.params:
            params["trigger"] = trigger_to_dict(self.params["trigger"])
        return {"kind": self.kind, "m1": self.m1, "m2": self.m2, "params": params, "name": self.name}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AttackTypeSpec":
        params = dict(data.get("params", {}))
        if "trigger" in params and isinstance(params["trigger"], Mapping):
            params["trigger"] = trigger_from_dict(params["trigger"])
        return cls(kind=data["kind"], m1=int(data.get("m1", 0)), m2=int(data.get("m2", 0)),
                   params=params, name=data.get("name", ""))


def trigger_to_dict(trigger: TriggerSpec) -> dict[str, Any]:
    return {"mask": [bool(v) for v in trigger.mask], "pattern": [float(v) for v in trigger.pattern],
            "target_label": int(trigger.target_label)}


def trigger_from_dict(data: Mapping[str, Any]) -> TriggerSpec:
    return TriggerSpec(np.array(data["mask"], dtype=bool), np.array(data["pattern"], dtype=float),
                       int(data["target_label"]))


def ipm_craft(benign_mean: np.ndarray, epsilon: float, m: int) -> list[np.ndarray]:
    """``m`` copies of ``-epsilon * benign_mean``."""
    if epsilon < 0 or m < 1:
        raise ValueError("IPM needs epsilon >= 0 and m >= 1")
    crafted = -float(epsilon) * np.asarray(benign_mean, dtype=float)
    return [crafted.copy() for _ in range(m)]


def benign_stats(estimates: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and (population) standard deviation; std is 0 for a single estimate."""
    E = np.asarray(estimates, dtype=float)
    if E.ndim != 2 or E.shape[0] == 0:
        raise ValueError("need at least one benign estimate")
    return E.mean(axis=0), E.std(axis=0)


def lmp_from_stats(mu: np.ndarray, sigma: np.ndarray, z: float) -> np.ndarray:
    return mu - np.sign(mu) * z * sigma


def lmp_craft(benign_estimates: Sequence[np.ndarray], z: float, m: int) -> list[np.ndarray]:
    """Directed deviation: ``mu_j - sign(mu_j) * z * sigma_j`` per coordinate."""
    if z <= 0 or m < 1:
        raise ValueError("LMP needs z > 0 and m >= 1")
    if len(benign_estimates) < 2:
        raise ValueError("LMP needs at least two benign estimates to define a spread")
    crafted = lmp_from_stats(*benign_stats(benign_estimates), z)
    return [crafted.copy() for _ in range(m)]


def eb_craft(intended_update: np.ndarray, boost: float) -> np.ndarray:
    if boost < 1:
        raise ValueError("boost must be >= 1")
    return float(boost) * np.asarray(intended_update, dtype=float)


def backdoor_craft(
    global_params: np.ndarray,
    spec: ModelSpec,
    poisoned_shard: ClientShard,
    scale: float,
    lr: float,
    n_iters: int,
    batch_size: int,
    seed: int | np.random.Generator,
    lam: float = 0.5,
) -> np.ndarray:
    """Model replacement: ``scale`` times the local update on the mixed clean/poisoned objective."""
    if scale < 1:
        raise ValueError("replacement scale must be >= 1")
    return scale * _backdoor_delta(global_params, spec, poisoned_shard, lr, n_iters, batch_size, seed, lam)


def _backdoor_delta(global_params, spec, shard: ClientShard, lr, n_iters, batch_size, seed, lam) -> np.ndarray:
    if len(shard) == 0:
        raise ValueError("backdoor client has an empty shard")
    if not shard.poisoned.any():
        raise ValueError("backdoor shard holds no triggered samples")
    clean = (shard.X[~shard.poisoned], shard.y[~shard.poisoned])
    poisoned = (shard.X[shard.poisoned], shard.y[shard.poisoned])
    if clean[0].shape[0] == 0:
        lam = 0.0
    return local_update_mixed(global_params, spec, clean, poisoned, lam, lr, n_iters, batch_size, seed)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


def rl_attack_apply(
    action: Sequence[float],
    benign_mean: np.ndarray,
    benign_std: np.ndarray,
    kind: str,
    backdoor_update: Callable[[float], np.ndarray] | None = None,
) -> np.ndarray:
    """Map a 3-d RL action to the crafted update shared by every client of the type.

    Untargeted: ``a1 * (-mu) + a2 * (sigma * unit(mu)) + a3 * mu``, so ``(1, 0, 0)``
    is IPM with epsilon 1.

    Backdoor: ``u = (1 + a1) * g_bd(lambda=a2)``, then capped to norm ``a3``
    (``a3 <= 0`` disables the cap). ``backdoor_update(lam)`` returns the
    unscaled poisoned local update for a given mixing weight.
    """
    a = np.asarray(action, dtype=float)
    if a.shape != (3,) or not np.isfinite(a).all():
        raise ValueError(f"attack action must be a finite 3-vector, got {action!r}")
    mu = np.asarray(benign_mean, dtype=float)
    if kind == "RLUntargeted":
        sigma = np.asarray(benign_std, dtype=float)
        return a[0] * (-mu) + a[1] * (sigma * _unit(mu)) + a[2] * mu
    if kind == "RLBackdoor":
        if backdoor_update is None:
            raise ValueError("RLBackdoor needs a backdoor_update callable")
        lam = float(np.clip(a[1], 0.0, 1.0))
        u = (1.0 + a[0]) * np.asarray(backdoor_update(lam), dtype=float)
        norm = np.linalg.norm(u)
        if a[2] > 0 and norm > a[2]:
            u = u * (a[2] / norm)
        return u
    raise ValueError(f"{kind!r} is not an RL attack kind")


@dataclass
class RoundContext:
    """What the attacker sees and controls in one round."""

    global_params: np.ndarray
    spec: ModelSpec
    shards: Mapping[int, ClientShard]  # sampled malicious clients only
    lr: float
    n_iters: int
    batch_size: int
    benign_updates: np.ndarray | None = None  # true benign updates (omniscient mode)


def malicious_groups(xi: AttackTypeSpec) -> tuple[range, range]:
    return range(0, xi.m1), range(xi.m1, xi.m1 + xi.m2)


def craft_round(
    xi: AttackTypeSpec,
    ctx: RoundContext,
    action: Sequence[float] | None,
    rng: np.random.Generator,
    omniscient: bool = False,
) -> dict[int, np.ndarray]:
    """Updates for every sampled malicious client (an attack action).

    Benign statistics come from the malicious clients' own clean local updates
    unless ``omniscient`` is set and true benign updates are supplied.
    """
    backdoor_ids, untargeted_ids = malicious_groups(xi)
    sampled_bd = sorted(i for i in ctx.shards if i in backdoor_ids)
    sampled_un = sorted(i for i in ctx.shards if i in untargeted_ids)
    out: dict[int, np.ndarray] = {}
    if not sampled_bd and not sampled_un:
        return out
    sgd_seed = int(rng.integers(2**62))

    if sampled_un:
        kind = xi.kind if xi.kind in UNTARGETED_KINDS else xi.params.get("companion", "IPM")
        if omniscient and ctx.benign_updates is not None and len(ctx.benign_updates) > 0:
            estimates = np.asarray(ctx.benign_updates)
        else:
            estimates = np.asarray([
                local_update(ctx.global_params, ctx.spec, ctx.shards[i].X, ctx.shards[i].y,
                             ctx.lr, ctx.n_iters, ctx.batch_size, sgd_seed + i)
                for i in sampled_un
            ])
        mu, sigma = benign_stats(estimates)
        params = {**DEFAULT_PARAMS.get(kind, {}), **(xi.params if kind == xi.kind else {})}
        if kind == "IPM":
            crafted = ipm_craft(mu, params["epsilon"], 1)[0]
        elif kind == "LMP":
            crafted = lmp_from_stats(mu, sigma, params["z"])
        elif kind == "EB":
            crafted = eb_craft(_label_flip_update(ctx, sampled_un[0], sgd_seed), params["boost"])
        elif kind == "RLUntargeted":
            if action is None:
                raise ValueError("RLUntargeted needs an attacker action")
            crafted = rl_attack_apply(action, mu, sigma, kind)
        else:
            raise ValueError(f"{kind!r} cannot drive the untargeted group")
        for i in sampled_un:
            out[i] = crafted.copy()

    if sampled_bd:
        # one representative client trains; the group submits identical updates
        lead = ctx.shards[sampled_bd[0]]
        lam = float(xi.params.get("lam", 0.5))

        def bd_update(l: float) -> np.ndarray:
            return _backdoor_delta(ctx.global_params, ctx.spec, lead, ctx.lr, ctx.n_iters,
                                   ctx.batch_size, sgd_seed + 7919, l)

        if xi.kind == "RLBackdoor":
            if action is None:
                raise ValueError("RLBackdoor needs an attacker action")
            crafted = rl_attack_apply(action, np.zeros_like(ctx.global_params), np.zeros_like(ctx.global_params),
                                      "RLBackdoor", bd_update)
        else:
            crafted = float(xi.params.get("scale", DEFAULT_PARAMS["BackdoorStatic"]["scale"])) * bd_update(lam)
        for i in sampled_bd:
            out[i] = crafted.copy()
    return out


def _label_flip_update(ctx: RoundContext, client: int, seed: int) -> np.ndarray:
    shard = ctx.shards[client]
    flipped = (shard.y + 1) % ctx.spec.n_classes
    return local_update(ctx.global_params, ctx.spec, shard.X, flipped, ctx.lr, ctx.n_iters, ctx.batch_size, seed)
