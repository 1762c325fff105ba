"""Small differentiable classifiers on flat parameter vectors.

Two architectures: ``linear`` (softmax regression) and ``mlp`` (one tanh hidden
layer). Every model is a flat ``np.ndarray``; :class:`ModelSpec` knows how to
slice it. Layouts are row-major:

* linear: ``W (C, dim) | b (C)``
* mlp:    ``W1 (h, dim) | b1 (h) | W2 (C, h) | b2 (C)``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import as_rng

ARCHITECTURES = ("linear", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    dim: int
    n_classes: int
    hidden: int = 0

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.dim < 1 or self.n_classes < 2:
            raise ValueError("need dim >= 1 and n_classes >= 2")
        if self.architecture == "mlp" and self.hidden < 1:
            raise ValueError("mlp needs hidden >= 1")

    @property
    def n_params(self) -> int:
        d, c, h = self.dim, self.n_classes, self.hidden
        if self.architecture == "linear":
            return c * d + c
        return h * d + h + c * h + c

    @property
    def output_slice(self) -> slice:
        """Weights (no biases) of the output layer."""
        d, c, h = self.dim, self.n_classes, self.hidden
        if self.architecture == "linear":
            return slice(0, c * d)
        start = h * d + h
        return slice(start, start + c * h)

    def unpack(self, params: np.ndarray) -> tuple[np.ndarray, ...]:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        d, c, h = self.dim, self.n_classes, self.hidden
        if self.architecture == "linear":
            return params[: c * d].reshape(c, d), params[c * d :]
        i = 0
        W1 = params[i : i + h * d].reshape(h, d); i += h * d
        b1 = params[i : i + h]; i += h
        W2 = params[i : i + c * h].reshape(c, h); i += c * h
        return W1, b1, W2, params[i:]


def init_params(spec: ModelSpec, seed: int | np.random.Generator, scale: float = 0.01) -> np.ndarray:
    """Small-variance Gaussian initialization (the hidden layer gets 10x ``scale``)."""
    rng = as_rng(seed)
    w = scale * rng.standard_normal(spec.n_params)
    if spec.architecture == "mlp":
        w[: spec.hidden * spec.dim] *= 10.0
    return w


def _check_batch(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("loss/gradient needs a non-empty 2-D batch")
    if y.shape != (X.shape[0],):
        raise ValueError("labels must match the batch size")
    return X, y


def logits(params: np.ndarray, spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if spec.architecture == "linear":
        W, b = spec.unpack(params)
        return X @ W.T + b
    W1, b1, W2, b2 = spec.unpack(params)
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def sample_losses(params: np.ndarray, spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy."""
    X, y = _check_batch(X, y)
    return -_log_softmax(logits(params, spec, X))[np.arange(len(y)), y]


def loss_F(params: np.ndarray, spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy over the batch."""
    return float(sample_losses(params, spec, X, y).mean())


def _check_weight(name: str, lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {lam}")


def loss_F_prime(
    params: np.ndarray,
    spec: ModelSpec,
    clean: tuple[np.ndarray, np.ndarray],
    poisoned: tuple[np.ndarray, np.ndarray],
    lam: float,
) -> float:
    """Backdoor objective: ``lam * F(clean) + (1 - lam) * F(poisoned)``."""
    _check_weight("lambda", lam)
    main = loss_F(params, spec, *clean) if lam > 0 else 0.0
    back = loss_F(params, spec, *poisoned) if lam < 1 else 0.0
    return lam * main + (1.0 - lam) * back


def min_relabel_loss(params: np.ndarray, spec: ModelSpec, X_trigger: np.ndarray, n_candidates: int) -> tuple[float, int]:
    """``min over c < n_candidates`` of the mean loss of ``X_trigger`` relabeled to ``c``.

    Returns the minimum and the minimizing label (lowest on ties).
    """
    X_trigger = np.asarray(X_trigger, dtype=float)
    if X_trigger.ndim != 2 or X_trigger.shape[0] == 0:
        raise ValueError("trigger set must be non-empty")
    if not 1 <= n_candidates <= spec.n_classes:
        raise ValueError(f"candidate count must lie in [1, {spec.n_classes}]")
    per_label = -_log_softmax(logits(params, spec, X_trigger)).mean(axis=0)[:n_candidates]
    best = int(np.argmin(per_label))
    return float(per_label[best]), best


def loss_F_dprime(
    params: np.ndarray,
    spec: ModelSpec,
    clean: tuple[np.ndarray, np.ndarray],
    X_trigger: np.ndarray,
    lam_prime: float,
    n_candidates: int,
) -> float:
    """Defender-side backdoor objective with unknown target label.

    ``lam' * F(clean) - (1 - lam') * min_c mean_j loss(w, (x_hat_j, c))``.
    """
    _check_weight("lambda'", lam_prime)
    X_trigger = np.asarray(X_trigger, dtype=float)
    if X_trigger.ndim != 2 or X_trigger.shape[0] == 0:
        raise ValueError("trigger set must be non-empty")
    main = loss_F(params, spec, *clean) if lam_prime > 0 else 0.0
    worst, _ = min_relabel_loss(params, spec, X_trigger, n_candidates)
    return lam_prime * main - (1.0 - lam_prime) * worst


def grad(params: np.ndarray, spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact gradient of :func:`loss_F` with respect to the flat parameters."""
    X, y = _check_batch(X, y)
    n = X.shape[0]
    if spec.architecture == "linear":
        W, b = spec.unpack(params)
        P = np.exp(_log_softmax(X @ W.T + b))
        P[np.arange(n), y] -= 1.0
        P /= n
        return np.concatenate([(P.T @ X).ravel(), P.sum(axis=0)])
    W1, b1, W2, b2 = spec.unpack(params)
    H = np.tanh(X @ W1.T + b1)
    P = np.exp(_log_softmax(H @ W2.T + b2))
    P[np.arange(n), y] -= 1.0
    P /= n
    dA = (P @ W2) * (1.0 - H**2)
    return np.concatenate([(dA.T @ X).ravel(), dA.sum(axis=0), (P.T @ H).ravel(), P.sum(axis=0)])


def accuracy(params: np.ndarray, spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> float:
    X, y = _check_batch(X, y)
    return float((logits(params, spec, X).argmax(axis=1) == y).mean())


def predict(params: np.ndarray, spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    return logits(params, spec, X).argmax(axis=1)


def _batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    if batch_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def local_update(
    global_params: np.ndarray,
    spec: ModelSpec,
    X: np.ndarray,
    y: np.ndarray,
    lr: float,
    n_iters: int,
    batch_size: int,
    seed: int | np.random.Generator,
) -> np.ndarray:
    """Run minibatch SGD from ``global_params``; return ``global - local`` (the server subtracts it)."""
    X, y = _check_batch(X, y)
    rng = as_rng(seed)
    w0 = np.asarray(global_params, dtype=float)
    # accumulate the delta directly so a single step returns exactly lr * grad
    delta = np.zeros_like(w0)
    for _ in range(n_iters):
        idx = _batch_indices(rng, X.shape[0], batch_size)
        delta = delta + lr * grad(w0 - delta, spec, X[idx], y[idx])
    return delta


def local_update_mixed(
    global_params: np.ndarray,
    spec: ModelSpec,
    clean: tuple[np.ndarray, np.ndarray],
    poisoned: tuple[np.ndarray, np.ndarray],
    lam: float,
    lr: float,
    n_iters: int,
    batch_size: int,
    seed: int | np.random.Generator,
) -> np.ndarray:
    """SGD on ``lam * F(clean) + (1 - lam) * F(poisoned)``, one minibatch from each part per step."""
    _check_weight("lambda", lam)
    Xc, yc = _check_batch(*clean) if lam > 0 else clean
    Xp, yp = _check_batch(*poisoned) if lam < 1 else poisoned
    rng = as_rng(seed)
    w0 = np.asarray(global_params, dtype=float)
    delta = np.zeros_like(w0)
    for _ in range(n_iters):
        w = w0 - delta
        g = np.zeros_like(w0)
        if lam > 0:
            idx = _batch_indices(rng, len(yc), batch_size)
            g += lam * grad(w, spec, Xc[idx], yc[idx])
        if lam < 1:
            idx = _batch_indices(rng, len(yp), batch_size)
            g += (1.0 - lam) * grad(w, spec, Xp[idx], yp[idx])
        delta = delta + lr * g
    return delta
