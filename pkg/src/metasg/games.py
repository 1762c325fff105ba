"""Small games with closed-form values, used as fixtures for the learners.

They expose the same surface as :class:`metasg.env.FLGame` (``rollout``,
``gamma``, ``horizon``) so every trainer runs on them unchanged. Both
players observe the constant vector ``[1.0]``; the attacker's type is
private and only reaches the defender through rewards.

For unbounded (unsquashed) Gaussian policies each game also provides
``exact_gradient``, the analytic gradient of the expected discounted return.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import PolicyParams, init_policy, policy_mean, policy_sample
from .seeding import stream
from .trajectory import StepRecord, Trajectory

OBS = np.ones(1)


@dataclass
class ToyState:
    round: int
    rng: np.random.Generator


class ToyGame:
    """Repeated one-shot game; subclasses define ``payoff``."""

    gamma: float = 0.99
    horizon: int = 1
    attacker_moves: bool = False

    def payoff(self, x: np.ndarray, y: np.ndarray | None, xi, rng: np.random.Generator) -> tuple[float, float]:
        raise NotImplementedError

    def reset(self, xi, seed: int) -> "ToyState":
        return ToyState(0, stream(seed, "noise"))

    def play_round(self, state: "ToyState", theta: PolicyParams, phi: PolicyParams | None, xi,
                   rng_D: np.random.Generator, rng_A: np.random.Generator, **_: object) -> tuple["ToyState", StepRecord]:
        x, lp_D = policy_sample(theta, OBS, rng_D)
        y, lp_A = (None, None)
        if self.attacker_moves:
            if phi is None:
                raise ValueError("this game needs an attacker policy")
            y, lp_A = policy_sample(phi, OBS, rng_A)
        r_D, r_A = self.payoff(x, y, xi, state.rng)
        rec = StepRecord(state.round, OBS, x, OBS if y is not None else None, y, r_D, r_A, lp_D, lp_A)
        return ToyState(state.round + 1, state.rng), rec

    def rollout(self, theta: PolicyParams, phi: PolicyParams | None, xi, seed: int, horizon: int | None = None,
                **_: object) -> Trajectory:
        H = self.horizon if horizon is None else horizon
        rng_D, rng_A = stream(seed, "policy_D"), stream(seed, "policy_A")
        state = self.reset(xi, seed)
        traj = Trajectory()
        for _ in range(H):
            state, rec = self.play_round(state, theta, phi, xi, rng_D, rng_A)
            traj.steps.append(rec)
        return traj

    def discount_sum(self) -> float:
        return float(sum(self.gamma**t for t in range(1, self.horizon + 1)))


def _gauss(p: PolicyParams) -> tuple[np.ndarray, np.ndarray]:
    if p.bounds is not None or p.hidden:
        raise ValueError("closed forms need an affine policy without squashing")
    return policy_mean(p, OBS), np.exp(2.0 * p.log_std)


def _chain(p: PolicyParams, d_mean: np.ndarray, d_var: np.ndarray) -> np.ndarray:
    """Map derivatives w.r.t. (mean, variance) onto the parameter vector (obs = [1])."""
    d_log_std = d_var * 2.0 * np.exp(2.0 * p.log_std)
    return np.concatenate([(d_mean[:, None] * OBS[None, :]).ravel(), d_mean, d_log_std])


@dataclass
class GaussianBandit(ToyGame):
    """Continuous two-armed bandit: ``r = sum_k beta_k a_k - a_k**2 / 2 + noise``."""

    beta: tuple[float, ...] = (1.0, -0.5)
    noise_std: float = 0.5
    gamma: float = 0.9
    horizon: int = 1

    def payoff(self, x, y, xi, rng):
        b = np.asarray(self.beta)
        return float(b @ x - 0.5 * x @ x + self.noise_std * rng.standard_normal()), 0.0

    def expected_return(self, theta: PolicyParams) -> float:
        m, v = _gauss(theta)
        b = np.asarray(self.beta)
        return self.discount_sum() * float(b @ m - 0.5 * (m @ m + v.sum()))

    def exact_gradient(self, theta: PolicyParams, *_: object, **__: object) -> np.ndarray:
        m, v = _gauss(theta)
        return self.discount_sum() * _chain(theta, np.asarray(self.beta) - m, -0.5 * np.ones_like(v))

    def make_policy(self, seed: int = 0, **kw) -> PolicyParams:
        return init_policy(1, None, seed, action_dim=len(self.beta), **kw)


@dataclass
class QuadraticTaskGame(ToyGame):
    """Task family ``r = -(a - mu_xi)**2``; ``xi`` indexes ``targets``. No attacker moves."""

    targets: tuple[float, ...] = (-1.0, 1.0)
    noise_std: float = 0.0
    gamma: float = 0.99
    horizon: int = 1

    def payoff(self, x, y, xi, rng):
        r = -float((x[0] - self.targets[xi]) ** 2)
        if self.noise_std:
            r += self.noise_std * rng.standard_normal()
        return r, 0.0

    def expected_return(self, theta: PolicyParams, xi: int) -> float:
        m, v = _gauss(theta)
        return -self.discount_sum() * float((m[0] - self.targets[xi]) ** 2 + v[0])

    def exact_gradient(self, theta: PolicyParams, phi, xi: int, player: str = "D") -> np.ndarray:
        m, v = _gauss(theta)
        g = _chain(theta, -2.0 * (m - self.targets[xi]), -np.ones_like(v))
        return self.discount_sum() * g


@dataclass
class TwoTypeStackelbergGame(ToyGame):
    """Leader-follower game whose best leader action depends on the hidden type.

    ``r_D = -(x - mu_xi)**2 - c * y**2`` and ``r_A = -(y - (x - mu_xi))**2``.
    The follower's best response ``y* = x - mu_xi`` exploits any mismatch, so
    the leader's value under best response is ``-(1 + c) (x - mu_xi)**2``
    minus variance terms. A single type-agnostic action is stuck at the
    prior-weighted compromise; adapting to the type removes the mismatch.
    """

    mus: tuple[float, ...] = (-1.0, 1.0)
    c: float = 0.5
    gamma: float = 0.99
    horizon: int = 1
    attacker_moves: bool = True
    bound: float = 3.0

    def payoff(self, x, y, xi, rng):
        mu = self.mus[xi]
        gap = x[0] - mu
        return -float(gap**2 + self.c * y[0] ** 2), -float((y[0] - gap) ** 2)

    def defender_policy(self, seed: int = 0, squashed: bool = True, **kw) -> PolicyParams:
        bounds = [(-self.bound, self.bound)] if squashed else None
        return init_policy(1, bounds, seed, action_dim=1, role="defender", **kw)

    def attacker_policy(self, seed: int = 0, squashed: bool = True, **kw) -> PolicyParams:
        bounds = [(-self.bound, self.bound)] if squashed else None
        return init_policy(1, bounds, seed, action_dim=1, role="attacker", **kw)

    def exact_gradient(self, theta: PolicyParams, phi: PolicyParams, xi: int, player: str = "D") -> np.ndarray:
        mx, vx = _gauss(theta)
        my, vy = _gauss(phi)
        mu = self.mus[xi]
        s = self.discount_sum()
        if player == "D":
            return s * _chain(theta, -2.0 * (mx - mu), -np.ones_like(vx))
        # J_A = -s * ((my - (mx - mu))**2 + vy + vx)
        return s * _chain(phi, -2.0 * (my - (mx - mu)), -np.ones_like(vy))


@dataclass
class BilinearGame(ToyGame):
    """One-step game ``r_A = x y - y**2 / 2``: the follower's best response is ``y* = x``."""

    gamma: float = 0.99
    horizon: int = 1
    attacker_moves: bool = True

    def payoff(self, x, y, xi, rng):
        return -float(x[0] ** 2), float(x[0] * y[0] - 0.5 * y[0] ** 2)

    def exact_gradient(self, theta: PolicyParams, phi: PolicyParams, xi, player: str = "A") -> np.ndarray:
        mx, _ = _gauss(theta)
        my, vy = _gauss(phi)
        if player != "A":
            raise ValueError("only the follower gradient is provided")
        return self.discount_sum() * _chain(phi, mx - my, -0.5 * np.ones_like(vy))
