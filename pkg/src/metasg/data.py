"""Synthetic datasets, non-i.i.d. client splitting and backdoor triggers.

Datasets are kept as parallel arrays (``X`` of shape ``(n, dim)``, integer
labels ``y``); :class:`Sample` exists for the single-sample API and for dumps.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .seeding import as_rng


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"inconsistent shapes X{self.X.shape} y{self.y.shape}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def samples(self) -> Iterator[Sample]:
        for x, label in zip(self.X, self.y):
            yield Sample(x.copy(), int(label))

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.n_classes)


@dataclass
class ClientShard:
    X: np.ndarray
    y: np.ndarray
    client_id: int
    poisoned: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise ValueError("shard features must be a 2-D array")
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.poisoned is None:
            self.poisoned = np.zeros(self.y.shape[0], dtype=bool)
        self.poisoned = np.asarray(self.poisoned, dtype=bool)
        if not (self.X.shape[0] == self.y.shape[0] == self.poisoned.shape[0]):
            raise ValueError("samples, labels and poisoned flags must have equal length")

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def is_malicious(self) -> bool:
        return bool(self.poisoned.any())

    def clean(self) -> "ClientShard":
        keep = ~self.poisoned
        return ClientShard(self.X[keep], self.y[keep], self.client_id)


@dataclass(frozen=True)
class TriggerSpec:
    mask: np.ndarray
    pattern: np.ndarray
    target_label: int

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask, dtype=bool)
        pattern = np.asarray(self.pattern, dtype=float)
        if mask.ndim != 1 or mask.shape != pattern.shape:
            raise ValueError("trigger mask and pattern must be 1-D with equal length")
        if self.target_label < 0:
            raise ValueError("target label must be non-negative")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "pattern", pattern)

    @property
    def dim(self) -> int:
        return self.mask.shape[0]

    @classmethod
    def patch(cls, dim: int, coords: Sequence[int], value: float, target_label: int) -> "TriggerSpec":
        """Constant-valued trigger on the given coordinates."""
        mask = np.zeros(dim, dtype=bool)
        mask[list(coords)] = True
        pattern = np.where(mask, float(value), 0.0)
        return cls(mask, pattern, target_label)


def gen_synthetic_dataset(
    dim: int,
    n_classes: int,
    n_per_class: int,
    class_separation: float,
    seed: int | np.random.Generator,
    *,
    n_informative: int | None = None,
    noise_std: float = 1.0,
    sample_seed: int | np.random.Generator | None = None,
) -> Dataset:
    """Gaussian blobs, one per class, with pairwise center distance >= ``class_separation``.

    Centers live in the first ``n_informative`` coordinates (all by default);
    the remaining coordinates are pure noise, which leaves room for triggers
    that do not collide with the main task.

    Class centers come from ``seed``; the per-sample noise comes from
    ``sample_seed`` when given (so several independent draws can share one
    set of centers), else from the same stream. Samples are ordered class by
    class.
    """
    if dim < 1 or n_classes < 2 or n_per_class < 1:
        raise ValueError(f"need dim>=1, C>=2, n_per_class>=1; got {dim}, {n_classes}, {n_per_class}")
    if class_separation < 0 or noise_std <= 0:
        raise ValueError("class_separation must be >= 0 and noise_std > 0")
    k = dim if n_informative is None else int(n_informative)
    if not 1 <= k <= dim:
        raise ValueError(f"n_informative must lie in [1, {dim}]")
    rng = as_rng(seed)
    centers = np.zeros((n_classes, dim))
    raw = rng.standard_normal((n_classes, k))
    diffs = raw[:, None, :] - raw[None, :, :]
    closest = np.sqrt((diffs**2).sum(-1))[~np.eye(n_classes, dtype=bool)].min()
    # closest pair lands exactly at the requested separation
    centers[:, :k] = raw * (class_separation / closest)
    noise_rng = rng if sample_seed is None else as_rng(sample_seed)
    X = centers.repeat(n_per_class, axis=0) + noise_std * noise_rng.standard_normal((n_classes * n_per_class, dim))
    y = np.arange(n_classes).repeat(n_per_class)
    return Dataset(X, y, n_classes)


def split_non_iid(
    dataset: Dataset,
    n_clients: int,
    n_groups: int,
    q: float,
    seed: int | np.random.Generator,
) -> list[ClientShard]:
    """Split by the label-biased group scheme.

    A sample of label ``c`` goes to group ``c mod n_groups`` with probability
    ``q`` and otherwise to a group drawn uniformly from all groups; inside its
    group it lands on a uniformly chosen client.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    if n_groups < 1 or n_clients < n_groups or n_clients % n_groups:
        raise ValueError(f"{n_clients} clients cannot be divided into {n_groups} equal groups")
    rng = as_rng(seed)
    n = len(dataset)
    per_group = n_clients // n_groups
    home = dataset.y % n_groups
    biased = rng.random(n) < q
    group = np.where(biased, home, rng.integers(0, n_groups, size=n))
    client = group * per_group + rng.integers(0, per_group, size=n)
    return [
        ClientShard(dataset.X[client == i], dataset.y[client == i], i)
        for i in range(n_clients)
    ]


def _check_trigger(dim: int, trigger: TriggerSpec) -> None:
    if trigger.dim != dim:
        raise ValueError(f"trigger has dim {trigger.dim}, sample has dim {dim}")


def apply_trigger(sample: Sample, trigger: TriggerSpec) -> Sample:
    features = np.asarray(sample.features, dtype=float)
    _check_trigger(features.shape[0], trigger)
    return Sample(np.where(trigger.mask, trigger.pattern, features), trigger.target_label)


def apply_trigger_batch(X: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Triggered copy of a feature matrix (labels are the caller's business)."""
    X = np.asarray(X, dtype=float)
    _check_trigger(X.shape[1], trigger)
    return np.where(trigger.mask[None, :], trigger.pattern[None, :], X)


def poison_shard(
    shard: ClientShard,
    trigger: TriggerSpec,
    ratio: float,
    seed: int | np.random.Generator,
) -> ClientShard:
    """Replace a ``ratio`` fraction of the shard's samples by triggered, relabeled copies.

    Samples already carrying the target label are never picked.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("poison ratio must lie in [0, 1]")
    rng = as_rng(seed)
    candidates = np.flatnonzero(shard.y != trigger.target_label)
    n_poison = min(int(round(ratio * len(shard))), candidates.size)
    picked = rng.choice(candidates, size=n_poison, replace=False) if n_poison else candidates[:0]
    X, y = shard.X.copy(), shard.y.copy()
    flags = np.zeros(len(shard), dtype=bool)
    X[picked] = apply_trigger_batch(X[picked], trigger)
    y[picked] = trigger.target_label
    flags[picked] = True
    return ClientShard(X, y, shard.client_id, flags)


# Columnar text dump: header "dim,C"; then one line per sample with the
# feature CSV, the label and the poisoned flag (0/1).


def dump_samples(path: str | Path, X: np.ndarray, y: np.ndarray, n_classes: int, poisoned: np.ndarray | None = None) -> None:
    X = np.asarray(X, dtype=float)
    flags = np.zeros(len(y), dtype=int) if poisoned is None else np.asarray(poisoned, dtype=int)
    buf = io.StringIO()
    buf.write(f"{X.shape[1]},{n_classes}\n")
    for row, label, flag in zip(X, y, flags):
        buf.write(",".join(repr(float(v)) for v in row))
        buf.write(f",{int(label)},{int(flag)}\n")
    Path(path).write_text(buf.getvalue())


def dump_shard(path: str | Path, shard: ClientShard, n_classes: int) -> None:
    dump_samples(path, shard.X, shard.y, n_classes, shard.poisoned)


def load_samples(path: str | Path) -> tuple[np.ndarray, np.ndarray, int, np.ndarray]:
    """Inverse of :func:`dump_samples`: ``(X, y, n_classes, poisoned)``."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dump")
    dim, n_classes = (int(v) for v in lines[0].split(","))
    rows = [line.split(",") for line in lines[1:] if line]
    for i, row in enumerate(rows, start=2):
        if len(row) != dim + 2:
            raise ValueError(f"{path}:{i}: expected {dim + 2} fields, got {len(row)}")
    X = np.array([[float(v) for v in row[:dim]] for row in rows]).reshape(-1, dim)
    y = np.array([int(row[dim]) for row in rows], dtype=np.int64)
    flags = np.array([row[dim + 1] == "1" for row in rows], dtype=bool)
    return X, y, n_classes, flags
