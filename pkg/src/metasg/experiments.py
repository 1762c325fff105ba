"""Fixed-defense FL runs and the small fixtures used by the end-to-end checks."""

from __future__ import annotations

from typing import Any

import numpy as np

from .aggregation import DefenseAction
from .attacks import AttackTypeSpec
from .env import EnvConfig, FLGame
from .trajectory import Trajectory


def run_fl(game: FLGame, defense, xi: AttackTypeSpec | None, seed: int, phi=None,
           post: DefenseAction | None = None) -> Trajectory:
    """One full episode with diagnostics (test accuracy, backdoor accuracy, true loss)."""
    return game.rollout(defense, phi, xi, seed, diagnostics=True, post=post)


def final_metrics(traj: Trajectory) -> dict[str, float]:
    last = traj.steps[-1].info
    return {k: float(last[k]) for k in ("main_accuracy", "backdoor_accuracy", "surrogate_loss", "true_loss")}


def ipm_fixture(seed: int, **overrides: Any) -> EnvConfig:
    """20 clients, all sampled every round, 4 of them (20%) running IPM."""
    base = dict(
        n_clients=20, sampling_rate=1.0, horizon=100, M1=0, M2=4, q=0.0,
        dim=10, n_classes=4, n_per_class=400, class_separation=3.0, n_informative=10,
        trigger_coords=[9], lr=0.5, batch_size=128, data_seed=seed,
    )
    base.update(overrides)
    return EnvConfig(**base)


IPM_EPSILON = 10.0


def ipm_attack(epsilon: float = IPM_EPSILON) -> AttackTypeSpec:
    return AttackTypeSpec("IPM", 0, 4, {"epsilon": epsilon}, name="ipm")


def backdoor_fixture(seed: int, **overrides: Any) -> EnvConfig:
    """20 clients, one model-replacement attacker; the trigger sits on feature
    coordinates that carry no class signal."""
    base = dict(
        n_clients=20, sampling_rate=1.0, horizon=100, M1=1, M2=0, q=0.0,
        dim=20, n_classes=4, n_per_class=400, class_separation=3.0, n_informative=4,
        trigger_coords=[16, 17, 18, 19], trigger_value=3.0, target_label=0,
        poison_ratio=0.5, lr=0.5, batch_size=64, data_seed=seed,
    )
    base.update(overrides)
    return EnvConfig(**base)


def backdoor_attack(scale: float = 20.0) -> AttackTypeSpec:
    return AttackTypeSpec("BackdoorStatic", 1, 0, {"scale": scale}, name="replacement")


BACKDOOR_DEFENSE = DefenseAction(mode="backdoor", noise_var=1e-4, bd_norm_bound=0.05, post="prune", prune_rate=0.5)


def ipm_comparison(seed: int) -> dict[str, float]:
    """Final test accuracy without attack, under IPM with plain mean, under IPM with trimmed mean."""
    game = FLGame(ipm_fixture(seed))
    xi = ipm_attack()
    mean = DefenseAction.open()
    trimmed = DefenseAction(mode="untargeted", trim=0.25)
    return {
        "no_attack": final_metrics(run_fl(game, mean, None, seed))["main_accuracy"],
        "mean": final_metrics(run_fl(game, mean, xi, seed))["main_accuracy"],
        "trimmed_mean": final_metrics(run_fl(game, trimmed, xi, seed))["main_accuracy"],
    }


def backdoor_comparison(seed: int, defense: DefenseAction = BACKDOOR_DEFENSE) -> dict[str, float]:
    """Main and backdoor accuracy for no attack, undefended replacement, defended replacement."""
    game = FLGame(backdoor_fixture(seed))
    xi = backdoor_attack()
    plain = DefenseAction(mode="backdoor")
    clean = final_metrics(run_fl(game, plain, None, seed))
    attacked = final_metrics(run_fl(game, plain, xi, seed))
    defended = final_metrics(run_fl(game, defense, xi, seed))
    return {
        "no_attack_main": clean["main_accuracy"],
        "mean_main": attacked["main_accuracy"],
        "mean_backdoor": attacked["backdoor_accuracy"],
        "defended_main": defended["main_accuracy"],
        "defended_backdoor": defended["backdoor_accuracy"],
    }


def summarize(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())
