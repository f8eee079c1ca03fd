"""Seeded random streams and fold assignment.

All randomness in evaluation and tuning comes from numpy's counter-based
Philox generator keyed by a root seed plus an integer path, so results do not
depend on call order or platform.
"""
from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "numpy.random.Philox(4x64, 10 rounds) via SeedSequence"


def make_rng(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed)] + [int(p) for p in path])
    return np.random.Generator(np.random.Philox(ss))


def stratified_folds(y, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold ids 0..k-1 with each label spread as evenly as possible."""
    y = np.asarray(y)
    n = y.size
    if k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= n (k={k}, n={n})")
    folds = np.empty(n, dtype=np.int64)
    start = 0
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (np.arange(idx.size) + start) % k
        start = (start + idx.size) % k
    return folds


def plain_folds(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= n (k={k}, n={n})")
    return (np.arange(n) % k)[rng.permutation(n)]
