"""Squashed-Gaussian policies and the Monte-Carlo policy gradient.

The pre-squash draw is ``u ~ N(mean(obs), diag(exp(log_std))**2)``; with
bounds the action is ``low + (high - low) * sigmoid(u)``, otherwise ``u``
itself. ``mean(obs)`` is affine in the observation, or affine after one tanh
hidden layer when ``hidden > 0``.

Flat parameter layout: ``[W1 (h, o) | b1 (h) |] W (k, o or h) | b (k) | log_std (k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .seeding import as_rng
from .trajectory import Trajectory, discounted_return

_LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PolicyParams:
    W: np.ndarray
    b: np.ndarray
    log_std: np.ndarray
    bounds: np.ndarray | None = None  # (k, 2) rows of (low, high)
    W1: np.ndarray | None = None
    b1: np.ndarray | None = None
    role: str = "policy"

    def __post_init__(self) -> None:
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        k = W.shape[0]
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(k))
        object.__setattr__(self, "log_std", np.asarray(self.log_std, dtype=float).reshape(k))
        if self.bounds is not None:
            bounds = np.asarray(self.bounds, dtype=float).reshape(k, 2)
            if not (bounds[:, 0] < bounds[:, 1]).all():
                raise ValueError("every bound needs low < high")
            object.__setattr__(self, "bounds", bounds)
        if (self.W1 is None) != (self.b1 is None):
            raise ValueError("W1 and b1 come together")
        if self.W1 is not None:
            W1 = np.atleast_2d(np.asarray(self.W1, dtype=float))
            object.__setattr__(self, "W1", W1)
            object.__setattr__(self, "b1", np.asarray(self.b1, dtype=float).reshape(W1.shape[0]))
            if W.shape[1] != W1.shape[0]:
                raise ValueError("output layer width must equal the hidden width")

    @property
    def action_dim(self) -> int:
        return self.W.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.W.shape[1] if self.W1 is None else self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return 0 if self.W1 is None else self.W1.shape[0]

    @property
    def n_params(self) -> int:
        return self.vector().size

    def vector(self) -> np.ndarray:
        parts = [] if self.W1 is None else [self.W1.ravel(), self.b1]
        return np.concatenate(parts + [self.W.ravel(), self.b, self.log_std])

    def with_vector(self, v: np.ndarray) -> "PolicyParams":
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} policy parameters, got {v.shape}")
        i, kw = 0, {}
        if self.W1 is not None:
            h, o = self.W1.shape
            kw["W1"] = v[i : i + h * o].reshape(h, o); i += h * o
            kw["b1"] = v[i : i + h]; i += h
        k, width = self.W.shape
        kw["W"] = v[i : i + k * width].reshape(k, width); i += k * width
        kw["b"] = v[i : i + k]; i += k
        kw["log_std"] = v[i : i + k]
        return replace(self, **kw)

    def log_std_mask(self) -> np.ndarray:
        """Boolean mask selecting the log-std entries of :meth:`vector`."""
        mask = np.zeros(self.n_params, dtype=bool)
        mask[-self.action_dim :] = True
        return mask


def init_policy(
    obs_dim: int,
    bounds: Sequence[tuple[float, float]] | None,
    seed: int | np.random.Generator | None = None,
    *,
    action_dim: int | None = None,
    hidden: int = 0,
    log_std: float = -0.5,
    weight_scale: float = 0.0,
    role: str = "policy",
) -> PolicyParams:
    """Fresh policy; with ``weight_scale == 0`` the mean is 0 (action at the bound midpoint)."""
    k = len(bounds) if bounds is not None else int(action_dim)
    if action_dim is not None and bounds is not None and action_dim != len(bounds):
        raise ValueError("action_dim disagrees with the number of bounds")
    rng = as_rng(seed)
    width = hidden if hidden else obs_dim
    kw = {}
    if hidden:
        kw["W1"] = rng.standard_normal((hidden, obs_dim)) / math.sqrt(obs_dim)
        kw["b1"] = np.zeros(hidden)
    return PolicyParams(
        W=weight_scale * rng.standard_normal((k, width)),
        b=np.zeros(k),
        log_std=np.full(k, float(log_std)),
        bounds=None if bounds is None else np.asarray(bounds, dtype=float),
        role=role,
        **kw,
    )


def _features(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    if params.W1 is None:
        return obs, None
    z = np.tanh(obs @ params.W1.T + params.b1)
    return z, z


def policy_mean(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    """Pre-squash mean for one observation (1-D) or a batch (2-D)."""
    obs = np.asarray(obs, dtype=float)
    feats, _ = _features(params, obs)
    return feats @ params.W.T + params.b


def squash(params: PolicyParams, u: np.ndarray) -> np.ndarray:
    if params.bounds is None:
        return np.array(u, dtype=float)
    low, high = params.bounds[:, 0], params.bounds[:, 1]
    a = low + (high - low) * expit(u)
    # keep strictly inside the open interval under rounding
    a = np.where(a <= low, np.nextafter(low, high), a)
    return np.where(a >= high, np.nextafter(high, low), a)


def unsquash(params: PolicyParams, action: np.ndarray) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    if params.bounds is None:
        return a
    low, high = params.bounds[:, 0], params.bounds[:, 1]
    if not ((a > low) & (a < high)).all():
        raise ValueError("action lies on or outside the policy bounds; density is degenerate there")
    return np.log(a - low) - np.log(high - a)


def _log_jacobian(params: PolicyParams, action: np.ndarray) -> np.ndarray:
    """``log |da/du|`` summed over action dims (zero without bounds)."""
    if params.bounds is None:
        return np.zeros(np.shape(action)[:-1])
    low, high = params.bounds[:, 0], params.bounds[:, 1]
    a = np.asarray(action, dtype=float)
    return (np.log(a - low) + np.log(high - a) - np.log(high - low)).sum(axis=-1)


def _gauss_logpdf(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (u - mean) * np.exp(-log_std)
    return (-0.5 * z**2 - log_std - 0.5 * _LOG_2PI).sum(axis=-1)


def policy_sample(params: PolicyParams, obs: np.ndarray, seed: int | np.random.Generator | None) -> tuple[np.ndarray, float]:
    """Draw an action and its log-density (change of variables included)."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (params.obs_dim,) or not np.isfinite(obs).all():
        raise ValueError(f"observation must be a finite vector of length {params.obs_dim}")
    rng = as_rng(seed)
    mean = policy_mean(params, obs)
    u = mean + np.exp(params.log_std) * rng.standard_normal(params.action_dim)
    action = squash(params, u)
    logp = _gauss_logpdf(u, mean, params.log_std) - _log_jacobian(params, action)
    return action, float(logp)


def policy_mode(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    """Deterministic action (squashed mean), the zero-variance limit."""
    return squash(params, policy_mean(params, obs))


def log_prob(params: PolicyParams, obs: np.ndarray, action: np.ndarray) -> float:
    u = unsquash(params, action)
    mean = policy_mean(params, np.asarray(obs, dtype=float))
    return float(_gauss_logpdf(u, mean, params.log_std) - _log_jacobian(params, np.asarray(action, dtype=float)))


def log_prob_grad_batch(params: PolicyParams, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Score vectors ``grad log pi(a_t | s_t)``, one row per (obs, action) pair."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    u = unsquash(params, actions)
    feats, z = _features(params, obs)
    mean = feats @ params.W.T + params.b
    inv_var = np.exp(-2.0 * params.log_std)
    d_mean = (u - mean) * inv_var  # (T, k)
    d_log_std = (u - mean) ** 2 * inv_var - 1.0
    T = obs.shape[0]
    parts = []
    if params.W1 is not None:
        d_pre = (d_mean @ params.W) * (1.0 - z**2)  # (T, h)
        parts += [(d_pre[:, :, None] * obs[:, None, :]).reshape(T, -1), d_pre]
    parts += [(d_mean[:, :, None] * feats[:, None, :]).reshape(T, -1), d_mean, d_log_std]
    return np.concatenate(parts, axis=1)


def log_prob_grad(params: PolicyParams, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Exact gradient of ``log pi(action | obs)`` over :meth:`PolicyParams.vector`."""
    obs = np.asarray(obs, dtype=float)
    action = np.asarray(action, dtype=float)
    if obs.shape != (params.obs_dim,) or action.shape != (params.action_dim,):
        raise ValueError("log_prob_grad takes one observation and one action")
    return log_prob_grad_batch(params, obs[None, :], action[None, :])[0]


BASELINES = ("none", "batch-mean")


def mc_policy_gradient(
    trajectories: Sequence[Trajectory],
    params: PolicyParams,
    gamma: float,
    player: str,
    baseline: str = "none",
) -> np.ndarray:
    """REINFORCE estimate ``1/N sum_i (sum_t grad log pi(a_t|s_t)) * (R(tau_i) - b)``."""
    if not trajectories:
        raise ValueError("policy gradient needs at least one trajectory")
    if baseline not in BASELINES:
        raise ValueError(f"baseline must be one of {BASELINES}")
    returns = np.array([discounted_return(t, gamma, player) for t in trajectories])
    centered = returns - returns.mean() if baseline == "batch-mean" else returns
    total = np.zeros(params.n_params)
    for traj, weight in zip(trajectories, centered):
        if weight == 0.0 or len(traj) == 0:
            continue
        obs = np.array([s.obs(player) for s in traj.steps])
        acts = np.array([s.action(player) for s in traj.steps])
        total += weight * log_prob_grad_batch(params, obs, acts).sum(axis=0)
    return total / len(trajectories)


def save_policy(path: str | Path, params: PolicyParams) -> None:
    """Versioned text checkpoint: header lines, then one decimal value per line."""
    bounds = "none" if params.bounds is None else ";".join(f"{float(lo)!r},{float(hi)!r}" for lo, hi in params.bounds)
    lines = [
        f"metasg-policy v{CHECKPOINT_VERSION}",
        f"role {params.role}",
        f"dims obs={params.obs_dim} action={params.action_dim} hidden={params.hidden}",
        f"bounds {bounds}",
        "values",
    ]
    lines += [repr(float(v)) for v in params.vector()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_policy(path: str | Path) -> PolicyParams:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("metasg-policy v"):
        raise ValueError(f"{path}: not a policy checkpoint")
    version = int(lines[0].split("v", 1)[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    role = lines[1].split(" ", 1)[1]
    dims = dict(item.split("=") for item in lines[2].split()[1:])
    obs_dim, k, hidden = int(dims["obs"]), int(dims["action"]), int(dims["hidden"])
    raw_bounds = lines[3].split(" ", 1)[1]
    bounds = None if raw_bounds == "none" else [tuple(float(x) for x in pair.split(",")) for pair in raw_bounds.split(";")]
    if lines[4] != "values":
        raise ValueError(f"{path}: malformed header")
    values = np.array([float(v) for v in lines[5:] if v])
    template = init_policy(obs_dim, bounds, 0, action_dim=k, hidden=hidden, role=role)
    return template.with_vector(values)
