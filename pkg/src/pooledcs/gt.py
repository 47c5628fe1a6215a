"""Binary group-testing decoders: COMP, NCOMP and two-round Dorfman."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch
from .matrix import PoolingMatrix


def _outcomes(M: PoolingMatrix, ybar) -> np.ndarray:
    ybar = np.asarray(ybar)
    if ybar.shape[-1] != M.m:
        raise DimensionMismatch(f"outcome length {ybar.shape[-1]} != m = {M.m}")
    return (ybar > 0).astype(np.int64)


def positive_pool_counts(M: PoolingMatrix, ybar) -> np.ndarray:
    """Number of positive pools per item; works on a batch of outcome rows."""
    return _outcomes(M, ybar) @ M.dense.astype(np.int64)


def comp_decode(M: PoolingMatrix, ybar) -> np.ndarray:
    """Items touching any negative pool are cleared, the rest are flagged."""
    ybar = _outcomes(M, ybar)
    negatives = (1 - ybar) @ M.dense.astype(np.int64)
    return (negatives == 0).astype(np.int8)


def ncomp_decode(M: PoolingMatrix, ybar, t: int) -> np.ndarray:
    """Flag an item when strictly more than ``t`` of its pools are positive."""
    if not 0 <= t < max(M.c, 1):
        raise ValueError(f"tolerance t must lie in [0, c) = [0, {M.c})")
    return (positive_pool_counts(M, ybar) > t).astype(np.int8)


def optimal_dorfman_pool_size(n: int, k: float) -> int:
    if not (0 < k <= n):
        raise ValueError("need 0 < k <= n")
    return max(1, int(round(math.sqrt(n / k))))


def dorfman_groups(n: int, g: int) -> list[np.ndarray]:
    """Consecutive groups of size g; the last one is shorter when g does not divide n."""
    if g < 1:
        raise ValueError("group size must be >= 1")
    return [np.arange(s, min(s + g, n)) for s in range(0, n, g)]


@dataclass(frozen=True, eq=False)
class DorfmanPlan:
    g: int
    round1_tests: int
    round2_tests: int
    verdicts: np.ndarray
    flagged_groups: int = 0

    @property
    def tests_used(self) -> int:
        return self.round1_tests + self.round2_tests


PoolOracle = Callable[[Sequence[np.ndarray]], np.ndarray]
ItemOracle = Callable[[np.ndarray], np.ndarray]


def dorfman_decode(items, g: int, pool_oracle: PoolOracle, item_oracle: ItemOracle) -> DorfmanPlan:
    """Two-round testing.

    ``items`` is an item count or anything with a length (labels, Population).
    ``pool_oracle`` receives the list of groups and returns one 0/1 result per
    group; ``item_oracle`` receives the indices needing an individual test and
    returns one 0/1 verdict per index.
    """
    n = int(items) if isinstance(items, (int, np.integer)) else len(getattr(items, "labels", items))
    groups = dorfman_groups(n, g)
    flags = np.asarray(pool_oracle(groups)).astype(bool)
    if flags.shape != (len(groups),):
        raise DimensionMismatch("pool oracle must return one result per group")
    verdicts = np.zeros(n, dtype=np.int8)
    retest = np.concatenate([grp for grp, f in zip(groups, flags) if f] or [np.zeros(0, int)])
    if retest.size:
        verdicts[retest] = np.asarray(item_oracle(retest)).astype(np.int8)
    return DorfmanPlan(g=g, round1_tests=len(groups), round2_tests=int(retest.size),
                       verdicts=verdicts, flagged_groups=int(flags.sum()))


def perfect_oracles(labels) -> tuple[PoolOracle, ItemOracle]:
    labels = np.asarray(labels)

    def pool(groups):
        return np.array([int(labels[grp].any()) for grp in groups], dtype=np.int8)

    def item(idx):
        return labels[idx].astype(np.int8)

    return pool, item
