"""Stand-in for the pooled network: exact and noisy pool counts, populations.

The noisy oracle replaces the network's pool-count prediction with a draw
from a row-stochastic confusion matrix indexed by the true count.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch
from .matrix import PoolingMatrix


def spawn_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for the stream identified by (seed, *keys).

    String keys are folded to integers so that streams can be named.
    """
    words = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            words.append(int.from_bytes(key.encode(), "little") % (2**63))
        else:
            words.append(int(key))
    return np.random.default_rng(words)


@dataclass(frozen=True, eq=False)
class ConfusionModel:
    """``matrix[g, s]`` = P(reported count s | true count g)."""

    matrix: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        P = np.array(self.matrix, dtype=float, copy=True)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 2:
            raise ValueError("confusion matrix must be square with at least 2 rows")
        if np.any(P < 0):
            raise ValueError("confusion probabilities must be non-negative")
        if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each confusion row must sum to 1 within 1e-9")
        P.setflags(write=False)
        object.__setattr__(self, "matrix", P)
        cdf = np.cumsum(P, axis=1)
        # pin the cdf to exactly 1 from the last outcome with mass onwards
        for g in range(P.shape[0]):
            last = np.flatnonzero(P[g] > 0)[-1]
            cdf[g, last:] = 1.0
        object.__setattr__(self, "_cdf", cdf)

    @property
    def r(self) -> int:
        return self.matrix.shape[0] - 1

    @classmethod
    def identity(cls, r: int, seed=None) -> "ConfusionModel":
        return cls(np.eye(r + 1), seed=seed)

    @classmethod
    def tridiagonal(cls, r: int, p_correct: float = 0.90, p_off: float = 0.05,
                    seed=None) -> "ConfusionModel":
        """Mass ``p_correct`` on the true count and ``p_off`` on each neighbour.

        The two boundary rows lose one neighbour and are renormalised.
        """
        P = np.zeros((r + 1, r + 1))
        for g in range(r + 1):
            P[g, g] = p_correct
            if g > 0:
                P[g, g - 1] = p_off
            if g < r:
                P[g, g + 1] = p_off
        P /= P.sum(axis=1, keepdims=True)
        return cls(P, seed=seed)

    @classmethod
    def binary(cls, false_positive: float, false_negative: float, seed=None) -> "ConfusionModel":
        return cls([[1 - false_positive, false_positive],
                    [false_negative, 1 - false_negative]], seed=seed)

    def binarized(self) -> "ConfusionModel":
        """2x2 model for a single item, read off rows 0 and 1 with reports >= 1 as positive."""
        P = self.matrix
        return ConfusionModel.binary(false_positive=float(P[0, 1:].sum()),
                                     false_negative=float(P[1, 0]), seed=self.seed)

    def positive_rate(self, g) -> np.ndarray:
        """P(reported count >= 1 | true count g), with g clipped to r."""
        g = np.minimum(np.asarray(g), self.r)
        return 1.0 - self.matrix[g, 0]

    def sample(self, true_counts, rng: np.random.Generator) -> np.ndarray:
        """Draw a reported count for every entry of ``true_counts`` independently."""
        g = np.asarray(true_counts, dtype=np.int64)
        return self.quantile(g, rng.random(g.shape))

    def quantile(self, true_counts, u) -> np.ndarray:
        """Inverse-cdf transform of uniforms ``u`` (same shape as ``true_counts``)."""
        g = np.asarray(true_counts, dtype=np.int64)
        if g.size and (g.min() < 0 or g.max() > self.r):
            raise DimensionMismatch(f"true counts must lie in [0, {self.r}]")
        return (self._cdf[g] <= np.asarray(u)[..., None]).sum(axis=-1).astype(np.int64)

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(float(v)) for v in row) for row in self.matrix) + "\n"

    @classmethod
    def from_csv(cls, path, seed=None) -> "ConfusionModel":
        rows = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        return cls([[float(v) for v in ln.split(",")] for ln in rows], seed=seed)


def _labels(x) -> np.ndarray:
    x = np.asarray(x)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("label vectors must be 0/1")
    return x.astype(np.int64)


def exact_counts(M: PoolingMatrix, x) -> np.ndarray:
    """y = Mx; accepts one label vector or a batch with one vector per row."""
    x = _labels(x)
    if x.shape[-1] != M.n:
        raise DimensionMismatch(f"label vector length {x.shape[-1]} != n = {M.n}")
    return x @ M.dense.T.astype(np.int64)


def noisy_counts(M: PoolingMatrix, x, cm: ConfusionModel,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    if cm.r != M.r:
        raise DimensionMismatch(f"confusion model covers counts 0..{cm.r}, pools hold {M.r}")
    if rng is None:
        rng = np.random.default_rng(cm.seed)
    return cm.sample(exact_counts(M, x), rng)


def binarize_counts(y) -> np.ndarray:
    return (np.asarray(y) > 0).astype(np.int64)


def binary_outcomes(M: PoolingMatrix, x, cm: ConfusionModel, rng: np.random.Generator,
                    binary_cm: ConfusionModel | None = None) -> np.ndarray:
    """Simulated binary pool results.

    By default the count oracle is thresholded at >= 1; a separate 2x2 model
    replaces that when given.
    """
    if binary_cm is None:
        return binarize_counts(noisy_counts(M, x, cm, rng))
    truth = binarize_counts(exact_counts(M, x))
    return binary_cm.sample(truth, rng)


@dataclass(frozen=True, eq=False)
class Population:
    n: int
    p: float
    labels: np.ndarray
    seed: int | None = None
    mode: str = "fixed"

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    def to_text(self) -> str:
        return "".join("1" if v else "0" for v in self.labels)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @staticmethod
    def load_labels(path) -> np.ndarray:
        text = Path(path).read_text().strip()
        if set(text) - {"0", "1"}:
            raise ValueError("population file must contain only 0/1 characters")
        return np.frombuffer(text.encode(), dtype=np.uint8) - ord("0")


def sample_population(n: int, p: float, mode: str = "fixed", seed=None,
                      rng: np.random.Generator | None = None) -> Population:
    """Ground-truth labels for ``n`` items at prevalence ``p``.

    ``fixed`` places exactly round(p n) positives at random positions;
    ``binomial`` flips an independent p-coin per item.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("prevalence must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int8)
    if mode == "fixed":
        k = int(np.floor(p * n + 0.5))
        labels[rng.choice(n, size=k, replace=False)] = 1
    elif mode == "binomial":
        labels[rng.random(n) < p] = 1
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return Population(n=n, p=p, labels=labels, seed=seed, mode=mode)
