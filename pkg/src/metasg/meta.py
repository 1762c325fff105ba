"""Meta-learning of defense policies: Reptile meta-RL, meta-Stackelberg learning,
the Bayesian-Stackelberg baseline and online adaptation.

Every function takes a ``game`` with a ``rollout(theta, phi, xi, seed)``
method (:class:`metasg.env.FLGame` or one of :mod:`metasg.games`).

Seed layout under ``MetaConfig.seed``::

    ("meta", t, "types")          type batch of outer iteration t
    ("meta", t, k, "adapt")       adaptation of batch slot k (shared by all trainers)
    ("meta", t, k, "probe")       first adaptation before the attacker moves
    ("meta", t, k, "br")          attacker best-response steps

Because Reptile's adaptation and the meta-Stackelberg re-adaptation read the
same ``"adapt"`` key, the two trainers coincide exactly when the attacker
never moves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .policy import PolicyParams, mc_policy_gradient
from .seeding import child_seed, stream
from .trajectory import Trajectory, discounted_return

log = logging.getLogger(__name__)


class MetaConfig(BaseModel):
    """Trainer hyper-parameters.

    ``T`` outer iterations (``N_D`` in the Stackelberg trainer), ``K`` types per
    batch, ``l`` adaptation steps of size ``eta``, meta step ``kappa``,
    ``N_A`` attacker steps of size ``kappa_A`` and ``batch_size`` episodes per
    gradient estimate.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    T: int = Field(100, ge=1)
    K: int = Field(10, ge=1)
    l: int = Field(10, ge=1)
    eta: float = Field(0.01, gt=0)
    kappa: float = Field(0.001, gt=0)
    kappa_A: float = Field(0.01, gt=0)
    N_A: int = Field(10, ge=0)
    batch_size: int = Field(16, ge=1)
    horizon: Optional[int] = Field(None, ge=1)
    baseline: Literal["none", "batch-mean"] = "batch-mean"
    estimator: Literal["mc", "exact"] = "mc"
    grad_clip: Optional[float] = Field(100.0, gt=0)
    train_log_std: bool = False
    bse_lr: Optional[float] = Field(None, gt=0)
    br_tol: Optional[float] = Field(None, gt=0)
    br_window: int = Field(5, ge=1)
    online_rounds: int = Field(50, ge=0)
    online_updates: int = Field(5, ge=1)
    eval_episodes: int = Field(64, ge=1)
    eval_N_A: Optional[int] = Field(None, ge=0)
    seed: int = Field(0, ge=0)


@dataclass
class MetaResult:
    """Trainer output; ``thetas[t]`` is the meta policy vector after ``t`` outer iterations."""

    theta: PolicyParams
    phis: list[Any] = field(default_factory=list)
    thetas: list[np.ndarray] = field(default_factory=list)
    adapted: list[list[np.ndarray]] = field(default_factory=list)
    types: list[list[int]] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)


def _check_Q(Q: Sequence[float], n: int) -> np.ndarray:
    p = np.asarray(Q, dtype=float)
    if n == 0:
        raise ValueError("the attack set is empty")
    if p.shape != (n,) or (p < 0).any() or not np.isclose(p.sum(), 1.0):
        raise ValueError(f"Q must be a probability vector over the {n} types")
    return p / p.sum()


def policy_gradient(
    game,
    theta,
    phi,
    xi,
    player: str,
    config: MetaConfig,
    seed: int,
    norms: list[float] | None = None,
) -> np.ndarray:
    """Gradient estimate of ``J_player`` w.r.t. that player's policy parameters.

    ``mc`` runs ``batch_size`` episodes with seeds derived from ``seed`` and
    applies the REINFORCE estimator; ``exact`` asks the game for its closed form.
    """
    params = theta if player == "D" else phi
    if config.estimator == "exact":
        g = np.asarray(game.exact_gradient(theta, phi, xi, player), dtype=float)
    else:
        trajs = [game.rollout(theta, phi, xi, child_seed(seed, i), horizon=config.horizon)
                 for i in range(config.batch_size)]
        g = mc_policy_gradient(trajs, params, game.gamma, player, config.baseline)
    if not config.train_log_std:
        g = np.where(params.log_std_mask(), 0.0, g)
    norm = float(np.linalg.norm(g))
    if not np.isfinite(norm):
        raise FloatingPointError(f"non-finite policy gradient for player {player}")
    if norms is not None:
        norms.append(norm)
    if config.grad_clip is not None and norm > config.grad_clip:
        log.info("clipping %s gradient norm %.3g to %.3g", player, norm, config.grad_clip)
        g = g * (config.grad_clip / norm)
    return g


def _ascend(params: PolicyParams, step: float, g: np.ndarray) -> PolicyParams:
    return params.with_vector(params.vector() + step * g)


def inner_adapt(
    theta: PolicyParams,
    phi,
    xi,
    l: int,
    eta: float,
    game,
    config: MetaConfig,
    seed: int,
    norms: list[float] | None = None,
) -> PolicyParams:
    """``l`` gradient-ascent steps on ``J_D`` against a fixed attacker, fresh episodes each step."""
    if l < 1:
        raise ValueError(f"adaptation needs l >= 1, got {l}")
    for k in range(l):
        if eta == 0.0:
            break
        g = policy_gradient(game, theta, phi, xi, "D", config, child_seed(seed, k), norms)
        theta = _ascend(theta, eta, g)
    return theta


def attacker_best_response(
    theta,
    phi0: PolicyParams,
    xi,
    N_A: int,
    kappa_A: float,
    game,
    config: MetaConfig,
    seed: int,
    norms: list[float] | None = None,
) -> PolicyParams:
    """``N_A`` gradient-ascent steps on ``J_A`` against the frozen defense ``theta``.

    With ``config.br_tol`` set, stops early once the gradient norm has stayed
    below the tolerance for ``config.br_window`` consecutive steps.
    """
    if N_A < 0:
        raise ValueError(f"N_A must be >= 0, got {N_A}")
    phi = phi0
    quiet = 0
    for j in range(N_A):
        if kappa_A == 0.0:
            break
        g = policy_gradient(game, theta, phi, xi, "A", config, child_seed(seed, j), norms)
        phi = _ascend(phi, kappa_A, g)
        if config.br_tol is not None:
            quiet = quiet + 1 if np.linalg.norm(g) < config.br_tol else 0
            if quiet >= config.br_window:
                log.debug("attacker converged after %d steps", j + 1)
                break
    return phi


def meta_update(theta: PolicyParams, adapted: Sequence[PolicyParams], kappa: float) -> PolicyParams:
    """``theta + kappa/K * sum(theta_k - theta)``, written as ``(1-kappa) theta + kappa/K sum theta_k``.

    The two forms agree in exact arithmetic; the second returns ``theta_k``
    bit for bit when ``K = 1`` and ``kappa = 1``.
    """
    if not adapted:
        raise ValueError("meta update needs at least one adapted policy")
    total = np.zeros(theta.n_params)
    for a in adapted:
        total = total + a.vector()
    return theta.with_vector((1.0 - kappa) * theta.vector() + (kappa / len(adapted)) * total)


def _type_batch(config: MetaConfig, t: int, p: np.ndarray) -> list[int]:
    # with replacement
    rng = stream(config.seed, "meta", t, "types")
    return [int(i) for i in rng.choice(p.size, size=config.K, p=p)]


def _attacker_for(phis: Sequence[Any], i: int, xi, needs_policy: bool):
    phi = phis[i] if phis else None
    if phi is None and needs_policy:
        raise ValueError(f"no attacker policy for type {i}")
    return phi


def _needs_policy(game, xi) -> bool:
    if getattr(game, "attacker_moves", False):
        return True
    return bool(getattr(xi, "is_rl", False)) and getattr(xi, "policy", None) is None


def reptile_meta_rl(
    theta0: PolicyParams,
    attack_set: Sequence[Any],
    Q: Sequence[float],
    config: MetaConfig,
    game,
    phis: Sequence[Any] | None = None,
    record: bool = False,
    callback: Optional[Callable[[int, MetaResult], None]] = None,
) -> MetaResult:
    """Reptile meta-RL against static attackers (one fixed ``phi`` per type, or none)."""
    p = _check_Q(Q, len(attack_set))
    phis = list(phis) if phis is not None else [None] * len(attack_set)
    theta = theta0
    res = MetaResult(theta0, phis, [theta0.vector()])
    for t in range(config.T):
        batch = _type_batch(config, t, p)
        adapted = []
        for k, i in enumerate(batch):
            xi = attack_set[i]
            phi = _attacker_for(phis, i, xi, _needs_policy(game, xi))
            seed = child_seed(config.seed, "meta", t, k, "adapt")
            adapted.append(inner_adapt(theta, phi, xi, config.l, config.eta, game, config, seed, res.grad_norms))
        theta = meta_update(theta, adapted, config.kappa)
        res.thetas.append(theta.vector())
        res.types.append(batch)
        if record:
            res.adapted.append([a.vector() for a in adapted])
        res.theta = theta
        if callback is not None:
            callback(t, res)
    res.theta = theta
    return res


def meta_stackelberg(
    theta0: PolicyParams,
    phi0_set: Sequence[Any],
    Q: Sequence[float],
    config: MetaConfig,
    game,
    attack_set: Sequence[Any],
    record: bool = False,
    callback: Optional[Callable[[int, MetaResult], None]] = None,
) -> MetaResult:
    """Meta-Stackelberg learning.

    Per sampled type: adapt from ``theta`` against the current attacker, let the
    attacker best-respond to the adapted defense for ``N_A`` steps, re-adapt
    from ``theta`` against that attacker, then apply the Reptile update to the
    re-adapted policies. Updated attackers persist across iterations.
    """
    p = _check_Q(Q, len(attack_set))
    if len(phi0_set) != len(attack_set):
        raise ValueError("need one initial attacker policy per type")
    phis = list(phi0_set)
    theta = theta0
    res = MetaResult(theta0, phis, [theta0.vector()])
    for t in range(config.T):
        batch = _type_batch(config, t, p)
        adapted = []
        for k, i in enumerate(batch):
            xi = attack_set[i]
            phi = _attacker_for(phis, i, xi, _needs_policy(game, xi))
            if config.N_A > 0 and phi is not None:
                probe = inner_adapt(theta, phi, xi, config.l, config.eta, game, config,
                                    child_seed(config.seed, "meta", t, k, "probe"), res.grad_norms)
                phi = attacker_best_response(probe, phi, xi, config.N_A, config.kappa_A, game, config,
                                             child_seed(config.seed, "meta", t, k, "br"), res.grad_norms)
                phis[i] = phi
            seed = child_seed(config.seed, "meta", t, k, "adapt")
            adapted.append(inner_adapt(theta, phi, xi, config.l, config.eta, game, config, seed, res.grad_norms))
        theta = meta_update(theta, adapted, config.kappa)
        res.thetas.append(theta.vector())
        res.types.append(batch)
        if record:
            res.adapted.append([a.vector() for a in adapted])
        res.theta = theta
        if callback is not None:
            callback(t, res)
    res.theta = theta
    res.phis = phis
    return res


def bse_baseline(
    theta0: PolicyParams,
    phi0_set: Sequence[Any],
    Q: Sequence[float],
    config: MetaConfig,
    game,
    attack_set: Sequence[Any],
    callback: Optional[Callable[[int, MetaResult], None]] = None,
) -> MetaResult:
    """One fixed defense against best-responding attackers, no adaptation.

    Same loop as :func:`meta_stackelberg` with zero adaptation steps: the
    attacker best-responds to ``theta`` itself and ``theta`` takes the averaged
    direct policy gradient with step ``bse_lr`` (default ``eta``).
    """
    p = _check_Q(Q, len(attack_set))
    if len(phi0_set) != len(attack_set):
        raise ValueError("need one initial attacker policy per type")
    phis = list(phi0_set)
    step = config.bse_lr if config.bse_lr is not None else config.eta
    theta = theta0
    res = MetaResult(theta0, phis, [theta0.vector()])
    for t in range(config.T):
        batch = _type_batch(config, t, p)
        total = np.zeros(theta.n_params)
        for k, i in enumerate(batch):
            xi = attack_set[i]
            phi = _attacker_for(phis, i, xi, _needs_policy(game, xi))
            if config.N_A > 0 and phi is not None:
                phi = attacker_best_response(theta, phi, xi, config.N_A, config.kappa_A, game, config,
                                             child_seed(config.seed, "meta", t, k, "br"), res.grad_norms)
                phis[i] = phi
            total = total + policy_gradient(game, theta, phi, xi, "D", config,
                                            child_seed(config.seed, "meta", t, k, "adapt"), res.grad_norms)
        theta = _ascend(theta, step / len(batch), total)
        res.thetas.append(theta.vector())
        res.types.append(batch)
        res.theta = theta
        if callback is not None:
            callback(t, res)
    res.theta = theta
    res.phis = phis
    return res


def evaluate_policy(game, theta, phi, xi, seed: int, n_episodes: int, player: str = "D",
                    horizon: int | None = None) -> float:
    """Mean discounted return over ``n_episodes`` independent episodes."""
    vals = [discounted_return(game.rollout(theta, phi, xi, child_seed(seed, "eval", e), horizon=horizon), game.gamma, player)
            for e in range(n_episodes)]
    return float(np.mean(vals))


def evaluate_against_best_response(
    game,
    theta: PolicyParams,
    phi,
    xi,
    config: MetaConfig,
    seed: int,
    adapt: bool,
) -> tuple[float, PolicyParams, Any]:
    """Defender value on one type after the attacker re-best-responds to the deployed defense.

    With ``adapt`` the defense first adapts (``l`` steps of ``eta``) against the
    attacker it meets; the attacker then best-responds to the adapted defense.
    Returns ``(J_D, deployed theta, attacker)``.
    """
    deployed = theta
    if adapt:
        deployed = inner_adapt(theta, phi, xi, config.l, config.eta, game, config, child_seed(seed, "adapt"))
    N_A = config.eval_N_A if config.eval_N_A is not None else config.N_A
    if phi is not None and N_A > 0:
        phi = attacker_best_response(deployed, phi, xi, N_A, config.kappa_A, game, config, child_seed(seed, "br"))
    value = evaluate_policy(game, deployed, phi, xi, child_seed(seed, "eval"), config.eval_episodes)
    return value, deployed, phi


def online_adapt(
    theta_meta: PolicyParams,
    game,
    xi,
    phi,
    config: MetaConfig,
    seed: int,
    n_rounds: int | None = None,
    l: int | None = None,
    eta: float | None = None,
    total_rounds: int | None = None,
    diagnostics: bool = True,
) -> tuple[PolicyParams, Trajectory]:
    """Run the defense online and adapt it from the rounds it has seen.

    The first ``n_rounds`` rounds are split into ``l`` windows. After each
    window the policy takes one gradient step of size ``eta`` built from the
    window's rounds: each round is scored by its surrogate reward against the
    window's mean reward. Execution then continues with the adapted policy
    until ``total_rounds`` (default: ``n_rounds``, at least one episode
    horizon). Episodes restart when the game's horizon is reached.

    Returns the final policy and the record of every executed round.
    """
    n_rounds = config.online_rounds if n_rounds is None else n_rounds
    l = config.online_updates if l is None else l
    eta = config.eta if eta is None else eta
    if n_rounds < 0 or l < 1:
        raise ValueError("n_rounds must be >= 0 and l >= 1")
    total = max(n_rounds, game.horizon) if total_rounds is None else total_rounds
    bounds = np.linspace(0, n_rounds, min(l, max(n_rounds, 1)) + 1).round().astype(int)[1:] if n_rounds else []
    episode = 0
    rng_D, rng_A = stream(seed, "online", episode, "policy_D"), stream(seed, "online", episode, "policy_A")
    state = game.reset(xi, child_seed(seed, "online", episode))
    record = Trajectory()
    window: list = []
    theta = theta_meta
    for r in range(total):
        if state.round >= game.horizon:
            episode += 1
            rng_D, rng_A = stream(seed, "online", episode, "policy_D"), stream(seed, "online", episode, "policy_A")
            state = game.reset(xi, child_seed(seed, "online", episode))
        state, rec = game.play_round(state, theta, phi, xi, rng_D, rng_A, diagnostics=diagnostics)
        record.steps.append(rec)
        window.append(rec)
        if r + 1 in bounds:
            if eta != 0.0:
                g = mc_policy_gradient([Trajectory([s]) for s in window], theta, game.gamma, "D", "batch-mean")
                if not config.train_log_std:
                    g = np.where(theta.log_std_mask(), 0.0, g)
                norm = float(np.linalg.norm(g))
                if config.grad_clip is not None and norm > config.grad_clip:
                    g = g * (config.grad_clip / norm)
                theta = _ascend(theta, eta, g)
            window = []
    return theta, record


def pretrain_attackers(
    game,
    attack_set: Sequence[Any],
    phi_init: Sequence[Any],
    defenses: Sequence[Any],
    config: MetaConfig,
    n_steps: int | None = None,
) -> list[Any]:
    """Initial attacker policies: best responses to fixed existing defenses.

    ``defenses[i]`` is the defense type ``i`` trains against (a classical rule
    name, a fixed action or a defense policy). Static types keep ``None``.
    """
    out = []
    steps = config.N_A if n_steps is None else n_steps
    for i, (xi, phi, d) in enumerate(zip(attack_set, phi_init, defenses)):
        if phi is None:
            out.append(None)
            continue
        out.append(attacker_best_response(d, phi, xi, steps, config.kappa_A, game, config,
                                          child_seed(config.seed, "meta", i, "br")))
    return out
