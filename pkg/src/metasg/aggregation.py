"""Robust aggregation and post-training model repair.

Updates are deltas: the server computes ``w_next = w - aggregate(updates)``.
All functions take ``updates`` as anything ``np.asarray`` turns into an
``(n, d)`` array.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from .model import ModelSpec
from .seeding import as_rng

log = logging.getLogger(__name__)

MODES = ("untargeted", "backdoor", "mixed")
POST_MODES = ("clip", "prune")


def _stack(updates: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    U = np.asarray(updates, dtype=float)
    if U.ndim == 1:
        U = U[None, :]
    if U.ndim != 2 or U.shape[0] == 0:
        raise ValueError("need a non-empty sequence of equal-length update vectors")
    return U


def trim_count(b: float, n: int) -> int:
    if not 0.0 <= b < 0.5:
        raise ValueError(f"trim fraction b must lie in [0, 0.5), got {b}")
    k = math.floor(b * n)
    if 2 * k >= n:
        raise ValueError(f"trimming {k} per side leaves nothing of {n} updates")
    return k


def trimmed_mean(updates, b: float, weights: np.ndarray | None = None) -> np.ndarray:
    """Coordinate-wise trimmed mean dropping ``floor(b * n)`` values per side.

    With ``weights``, the surviving values of each coordinate are averaged
    with their owners' weights; a coordinate whose survivors all carry zero
    weight aggregates to 0.
    """
    U = _stack(updates)
    n = U.shape[0]
    k = trim_count(b, n)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or (w < 0).any():
        raise ValueError("weights must be a non-negative vector, one per update")
    if k == 0:
        vals, wk = U, w[:, None] * np.ones_like(U)
    else:
        order = np.argsort(U, axis=0, kind="stable")[k : n - k]
        vals = np.take_along_axis(U, order, axis=0)
        wk = w[order]
    if weights is None:
        return vals.mean(axis=0)
    total = wk.sum(axis=0)
    num = (wk * vals).sum(axis=0)
    return np.divide(num, total, out=np.zeros_like(num), where=total > 0)


def coordinate_median(updates) -> np.ndarray:
    return np.median(_stack(updates), axis=0)


def krum_scores(updates, f_count: int) -> np.ndarray:
    U = _stack(updates)
    n = U.shape[0]
    if f_count < 0 or n < f_count + 3:
        raise ValueError(f"krum needs n >= f + 3 (n={n}, f={f_count})")
    D = ((U[:, None, :] - U[None, :, :]) ** 2).sum(axis=-1)
    m = n - f_count - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(D[i], i))
        scores[i] = others[:m].sum()
    return scores


def krum(updates, f_count: int) -> tuple[np.ndarray, int]:
    """Select the update with the smallest summed squared distance to its ``n - f - 2`` nearest peers."""
    U = _stack(updates)
    idx = int(np.argmin(krum_scores(U, f_count)))
    return U[idx].copy(), idx


def norm_clip(update: np.ndarray, a: float) -> np.ndarray:
    if not a > 0:
        raise ValueError(f"norm bound must be positive, got {a}")
    u = np.asarray(update, dtype=float)
    norm = np.linalg.norm(u)
    if norm <= a:
        return u.copy()
    return u * (a / norm)


def clip_all(updates, a: float) -> np.ndarray:
    U = _stack(updates)
    if not a > 0:
        raise ValueError(f"norm bound must be positive, got {a}")
    if math.isinf(a):
        return U.copy()
    norms = np.linalg.norm(U, axis=1)
    scale = np.where(norms > a, a / np.where(norms > 0, norms, 1.0), 1.0)
    return U * scale[:, None]


def foolsgold_weights(history, c: float) -> np.ndarray:
    """Down-weight clients whose accumulated updates point the same way.

    ``s_i`` is the largest cosine similarity between client ``i``'s history and
    any other client's; weight is 1 when ``s_i <= c`` and
    ``max(0, (1 - s_i) / (1 - c))`` otherwise. Zero histories keep weight 1.
    """
    H = _stack(history)
    n = H.shape[0]
    if n < 2:
        raise ValueError("foolsgold needs at least two clients")
    if not -1.0 <= c <= 1.0:
        raise ValueError(f"cosine threshold must lie in [-1, 1], got {c}")
    norms = np.linalg.norm(H, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("foolsgold: %d zero-norm history vector(s) kept at weight 1", int(zero.sum()))
    unit = H / np.where(zero, 1.0, norms)[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    cos[zero, :] = -np.inf
    cos[:, zero] = -np.inf
    np.fill_diagonal(cos, -np.inf)
    s = cos.max(axis=1)
    weights = np.ones(n)
    flagged = (s > c) & ~zero
    if c < 1.0:
        weights[flagged] = np.maximum(0.0, (1.0 - s[flagged]) / (1.0 - c))
    return weights


def add_gaussian_noise(update: np.ndarray, d: float, seed: int | np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, d) noise (``d`` is the variance)."""
    if d < 0:
        raise ValueError(f"noise variance must be non-negative, got {d}")
    u = np.asarray(update, dtype=float)
    if d == 0:
        return u.copy()
    return u + math.sqrt(d) * as_rng(seed).standard_normal(u.shape)


def neuron_clip(params: np.ndarray, e: float, spec: ModelSpec) -> np.ndarray:
    """Bound each hidden neuron's outgoing weight norm by ``e``.

    Linear models have no hidden neurons; their weights are clamped to ``[-e, e]``.
    """
    if not e > 0:
        raise ValueError(f"clip range must be positive, got {e}")
    w = np.array(params, dtype=float)
    sl = spec.output_slice
    if spec.architecture == "linear":
        w[sl] = np.clip(w[sl], -e, e)
        return w
    W2 = w[sl].reshape(spec.n_classes, spec.hidden)
    norms = np.linalg.norm(W2, axis=0)
    scale = np.where(norms > e, e / np.where(norms > 0, norms, 1.0), 1.0)
    w[sl] = (W2 * scale[None, :]).ravel()
    return w


def prune(params: np.ndarray, f_rate: float, spec: ModelSpec) -> np.ndarray:
    """Zero the ``floor(f * L)`` smallest-magnitude output-layer weights (ties by index)."""
    if not 0.0 <= f_rate <= 1.0:
        raise ValueError(f"prune rate must lie in [0, 1], got {f_rate}")
    w = np.array(params, dtype=float)
    sl = spec.output_slice
    out = w[sl]
    n_zero = math.floor(f_rate * out.size)
    if n_zero:
        out[np.argsort(np.abs(out), kind="stable")[:n_zero]] = 0.0
        w[sl] = out
    return w


@dataclass(frozen=True)
class DefenseAction:
    """Defender hyperparameters for one round.

    ``trim`` (b), ``norm_bound`` (a) and ``cos_threshold`` (c) drive the
    untargeted pipeline; ``noise_var`` (d) and ``bd_norm_bound`` (the backdoor
    pipeline's own a) the backdoor one. ``post`` selects the post-training
    repair: ``"clip"`` uses ``clip_range`` (e), ``"prune"`` uses ``prune_rate`` (f).
    ``math.inf`` norm bounds mean "no clipping".
    """

    mode: str = "untargeted"
    trim: float = 0.0
    norm_bound: float = math.inf
    cos_threshold: float = 1.0
    noise_var: float = 0.0
    bd_norm_bound: float = math.inf
    post: str | None = None
    clip_range: float | None = None
    prune_rate: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown defense mode {self.mode!r}")
        if not 0.0 <= self.trim < 0.5:
            raise ValueError(f"trim fraction b must lie in [0, 0.5), got {self.trim}")
        if not (self.norm_bound > 0 and self.bd_norm_bound > 0):
            raise ValueError("norm bounds must be positive")
        if not -1.0 <= self.cos_threshold <= 1.0:
            raise ValueError("cosine threshold must lie in [-1, 1]")
        if self.noise_var < 0:
            raise ValueError("noise variance must be non-negative")
        if self.post is not None and self.post not in POST_MODES:
            raise ValueError(f"unknown post-training defense {self.post!r}")
        if self.post == "clip" and not (self.clip_range is not None and self.clip_range > 0):
            raise ValueError("post='clip' needs a positive clip_range")
        if self.post == "prune" and not (self.prune_rate is not None and 0.0 <= self.prune_rate <= 1.0):
            raise ValueError("post='prune' needs prune_rate in [0, 1]")

    @classmethod
    def open(cls, mode: str = "untargeted") -> "DefenseAction":
        """The action under which every training-stage component is the identity."""
        return cls(mode=mode)

    @classmethod
    def from_vector(cls, mode: str, vec: Sequence[float], post: str | None = None) -> "DefenseAction":
        """Build from a policy action: ``(b, a, c)``, ``(d, a, e|f)`` or both concatenated for ``mixed``."""
        v = [float(x) for x in vec]
        expected = 6 if mode == "mixed" else 3
        if len(v) != expected:
            raise ValueError(f"mode {mode!r} takes a {expected}-vector, got {len(v)}")
        kw: dict[str, Any] = {"mode": mode, "post": post}
        if mode in ("untargeted", "mixed"):
            kw.update(trim=v[0], norm_bound=v[1], cos_threshold=v[2])
        if mode in ("backdoor", "mixed"):
            d, a, ef = v[-3:]
            kw.update(noise_var=d, bd_norm_bound=a)
            if post == "clip":
                kw["clip_range"] = ef
            elif post == "prune":
                kw["prune_rate"] = ef
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DefenseAction":
        kw = dict(data)
        for key in ("norm_bound", "bd_norm_bound"):
            if kw.get(key, math.inf) is None:
                kw[key] = math.inf
        return cls(**kw)


def apply_defense(
    action: DefenseAction,
    updates,
    foolsgold_history=None,
    seed: int | np.random.Generator | None = None,
) -> np.ndarray:
    """Training-stage aggregation for one round; returns the aggregated delta.

    Order is fixed: norm clip, FoolsGold reweighting, trimmed mean, noise.
    The backdoor mode skips reweighting/trimming (plain mean of clipped updates).
    ``foolsgold_history`` defaults to the current updates.
    """
    U = _stack(updates)
    if action.mode in ("untargeted", "mixed"):
        U = clip_all(U, action.norm_bound)
    if action.mode in ("backdoor", "mixed"):
        U = clip_all(U, action.bd_norm_bound)
    if action.mode == "backdoor":
        agg = U.mean(axis=0)
    else:
        weights = None
        if action.cos_threshold < 1.0 and U.shape[0] >= 2:
            hist = U if foolsgold_history is None else _stack(foolsgold_history)
            if hist.shape != U.shape:
                raise ValueError("foolsgold history must have one vector per update")
            weights = foolsgold_weights(hist, action.cos_threshold)
        agg = trimmed_mean(U, action.trim, weights)
    if action.mode in ("backdoor", "mixed") and action.noise_var > 0:
        agg = add_gaussian_noise(agg, action.noise_var, seed)
    return agg


def post_train(action: DefenseAction, params: np.ndarray, spec: ModelSpec) -> np.ndarray:
    if action.post == "clip":
        return neuron_clip(params, action.clip_range, spec)
    if action.post == "prune":
        return prune(params, action.prune_rate, spec)
    raise ValueError("post-training defense is not configured on this action")


CLASSICAL_RULES = ("mean", "median", "clipping_median", "krum", "trimmed_mean")


def classical_aggregate(rule: str, updates, *, f_count: int = 0, norm_bound: float = 1.0, trim: float = 0.1) -> np.ndarray:
    """Fixed baseline aggregators (not part of the learned action space)."""
    U = _stack(updates)
    if rule == "mean":
        return U.mean(axis=0)
    if rule == "median":
        return coordinate_median(U)
    if rule == "clipping_median":
        return coordinate_median(clip_all(U, norm_bound))
    if rule == "krum":
        f = min(f_count, U.shape[0] - 3)
        if f < 0:
            return U.mean(axis=0)
        return krum(U, f)[0]
    if rule == "trimmed_mean":
        return trimmed_mean(U, trim)
    raise ValueError(f"unknown aggregation rule {rule!r}")
