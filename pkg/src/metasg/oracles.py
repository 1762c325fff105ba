"""Slow reference implementations of the aggregation rules and a randomized
equivalence bench against the vectorized versions.

The references use plain Python loops and ``math.fsum`` so they share no code
path with :mod:`metasg.aggregation`.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass

import numpy as np

from . import aggregation as agg


def trimmed_mean_ref(rows: list[list[float]], b: float) -> list[float]:
    n = len(rows)
    k = math.floor(b * n)
    out = []
    for j in range(len(rows[0])):
        col = sorted(r[j] for r in rows)
        kept = col[k : n - k]
        out.append(math.fsum(kept) / len(kept))
    return out


def median_ref(rows: list[list[float]]) -> list[float]:
    return [statistics.median(r[j] for r in rows) for j in range(len(rows[0]))]


def krum_ref(rows: list[list[float]], f: int) -> int:
    n = len(rows)
    m = n - f - 2
    best, best_score = -1, math.inf
    for i in range(n):
        dists = sorted(math.fsum((a - c) ** 2 for a, c in zip(rows[i], rows[j])) for j in range(n) if j != i)
        score = math.fsum(dists[:m])
        if score < best_score:  # strict: ties keep the lower index
            best, best_score = i, score
    return best


@dataclass
class BenchResult:
    name: str
    passed: int
    failed: int
    max_error: float

    @property
    def ok(self) -> bool:
        return self.failed == 0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.passed} passed, {self.failed} failed, max error {self.max_error:.3g}"


def _instance(rng: np.random.Generator) -> np.ndarray:
    n = int(rng.integers(3, 31))
    d = int(rng.integers(1, 51))
    U = rng.normal(0.0, rng.choice([0.01, 1.0, 100.0]), size=(n, d))
    if rng.random() < 0.2:  # repeated rows and values make ties
        U[rng.integers(n)] = U[rng.integers(n)]
        U = np.round(U, 1)
    return U


def bench_trimmed_mean(n_instances: int, seed: int, tol: float = 1e-9) -> BenchResult:
    rng = np.random.default_rng(seed)
    passed = failed = 0
    worst = 0.0
    for _ in range(n_instances):
        U = _instance(rng)
        n = U.shape[0]
        b = float(rng.uniform(0.0, 0.5))
        while 2 * math.floor(b * n) >= n:
            b = float(rng.uniform(0.0, 0.5))
        got = agg.trimmed_mean(U, b)
        want = np.array(trimmed_mean_ref(U.tolist(), b))
        err = float(np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want))))
        worst = max(worst, err)
        passed, failed = (passed + 1, failed) if err <= tol else (passed, failed + 1)
    return BenchResult("trimmed_mean", passed, failed, worst)


def bench_median(n_instances: int, seed: int, tol: float = 1e-9) -> BenchResult:
    rng = np.random.default_rng(seed)
    passed = failed = 0
    worst = 0.0
    for _ in range(n_instances):
        U = _instance(rng)
        got = agg.coordinate_median(U)
        want = np.array(median_ref(U.tolist()))
        err = float(np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want))))
        worst = max(worst, err)
        passed, failed = (passed + 1, failed) if err <= tol else (passed, failed + 1)
    return BenchResult("coordinate_median", passed, failed, worst)


def bench_krum(n_instances: int, seed: int, tol: float = 1e-9) -> BenchResult:
    rng = np.random.default_rng(seed)
    passed = failed = 0
    worst = 0.0
    for _ in range(n_instances):
        U = _instance(rng)
        n = U.shape[0]
        f = int(rng.integers(0, n - 2))
        sel, idx = agg.krum(U, f)
        want = krum_ref(U.tolist(), f)
        err = float(np.max(np.abs(sel - U[want])))
        worst = max(worst, err)
        passed, failed = (passed + 1, failed) if idx == want and err <= tol else (passed, failed + 1)
    return BenchResult("krum", passed, failed, worst)


def bench_trim_robustness(n_instances: int, seed: int, magnitude: float = 1e6) -> BenchResult:
    """Inject ``floor(b n)`` huge values per coordinate; the output must stay in the benign range."""
    rng = np.random.default_rng(seed)
    passed = failed = 0
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(4, 31))
        d = int(rng.integers(1, 51))
        k = int(rng.integers(1, (n - 2) // 2 + 1))
        b = (k + 0.5) / n  # floor(b n) == k and 2k < n
        U = rng.normal(size=(n, d))
        benign_mask = np.ones((n, d), dtype=bool)
        for j in range(d):
            bad = rng.choice(n, size=k, replace=False)
            U[bad, j] = magnitude * rng.choice([-1.0, 1.0], size=k)
            benign_mask[bad, j] = False
        out = agg.trimmed_mean(U, b)
        lo = np.where(benign_mask, U, np.inf).min(axis=0)
        hi = np.where(benign_mask, U, -np.inf).max(axis=0)
        excess = float(np.max(np.maximum(lo - out, out - hi)))
        worst = max(worst, max(excess, 0.0))
        passed, failed = (passed + 1, failed) if excess <= 0.0 else (passed, failed + 1)
    return BenchResult("trim_robustness", passed, failed, worst)


def run_bench(n_instances: int = 1000, seed: int = 0) -> list[BenchResult]:
    return [
        bench_trimmed_mean(n_instances, seed),
        bench_median(n_instances, seed + 1),
        bench_krum(n_instances, seed + 2),
        bench_trim_robustness(max(1, n_instances // 2), seed + 3),
    ]
