"""Episode records shared by the environment, the policies and the trainers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

PLAYERS = ("D", "A")


@dataclass
class StepRecord:
    round: int
    defender_obs: np.ndarray
    defender_action: np.ndarray
    attacker_obs: np.ndarray | None
    attacker_action: np.ndarray | None
    r_D: float
    r_A: float
    logprob_D: float
    logprob_A: float | None
    info: dict[str, Any] = field(default_factory=dict)

    def obs(self, player: str) -> np.ndarray | None:
        return self.defender_obs if player == "D" else self.attacker_obs

    def action(self, player: str) -> np.ndarray | None:
        return self.defender_action if player == "D" else self.attacker_action

    def reward(self, player: str) -> float:
        return self.r_D if player == "D" else self.r_A


@dataclass
class Trajectory:
    steps: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def rewards(self, player: str) -> np.ndarray:
        _check_player(player)
        return np.array([s.reward(player) for s in self.steps], dtype=float)


def _check_player(player: str) -> None:
    if player not in PLAYERS:
        raise ValueError(f"player must be 'D' or 'A', got {player!r}")


def discounted_return(trajectory: Trajectory, gamma: float, player: str) -> float:
    """``sum_t gamma**t * r_t`` with ``t`` counted from 1."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    r = trajectory.rewards(player)
    return float(np.dot(gamma ** np.arange(1, r.size + 1), r))


def _jsonable(v: Any) -> Any:
    if isinstance(v, np.ndarray):
        return [float(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def dump_trajectory(trajectory: Trajectory, lines: list[str] | None = None) -> list[str]:
    """Line-delimited JSON, one object per round.

    Keys: ``round``, ``defender_action``, ``attacker_action``, ``r_D``, ``r_A``,
    plus the step's ``info`` entries (``surrogate_loss``, ``true_loss``,
    ``main_accuracy``, ``backdoor_accuracy`` for the FL game).
    """
    out = [] if lines is None else lines
    for s in trajectory.steps:
        rec = {
            "round": s.round,
            "defender_action": _jsonable(s.defender_action),
            "attacker_action": _jsonable(s.attacker_action),
            "r_D": float(s.r_D),
            "r_A": float(s.r_A),
        }
        rec.update({k: _jsonable(v) for k, v in s.info.items()})
        out.append(json.dumps(rec, sort_keys=True))
    return out


def total_steps(trajectories: Iterable[Trajectory]) -> int:
    return sum(len(t) for t in trajectories)
