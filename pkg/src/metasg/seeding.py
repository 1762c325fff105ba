"""Named, independent random streams derived from one integer seed.

Each component (data, client sampling, policy draws, defense noise, ...) gets
its own ``SeedSequence`` branch, so changing how many numbers one component
consumes never shifts the draws of another.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "data": 0,
    "sampling": 1,
    "policy_D": 2,
    "policy_A": 3,
    "noise": 4,
    "sgd": 5,
    "init": 6,
    "meta": 7,
    "eval": 8,
    "attack": 9,
    "split": 10,
    "types": 11,
    "probe": 12,
    "adapt": 13,
    "br": 14,
    "online": 15,
}


def _key(name: str | int) -> int:
    if isinstance(name, str):
        return STREAMS[name]
    if name < 0:
        raise ValueError(f"spawn keys must be non-negative, got {name}")
    return int(name)


def seed_seq(seed: int, *path: str | int) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))


def stream(seed: int, *path: str | int) -> np.random.Generator:
    """Generator for the stream at ``path`` below ``seed``."""
    return np.random.default_rng(seed_seq(seed, *path))


def child_seed(seed: int, *path: str | int) -> int:
    """A derived integer seed (63-bit) for handing to another seeded call."""
    state = seed_seq(seed, *path).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def as_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
