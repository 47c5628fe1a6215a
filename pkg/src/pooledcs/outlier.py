"""Pooled outlier detection on synthetic feature vectors.

A Gaussian mixture fitted to inlier pool features turns a feature vector into
an anomaly score (negative log density). A histogram of scores from pools with
known outlier counts maps a new score to a count, which then feeds the usual
pooled decoders.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, solve_triangular
from scipy.special import logsumexp

from .errors import DegenerateComponent, DimensionMismatch
from .gt import DorfmanPlan, dorfman_decode
from .matrix import PoolingMatrix

_LOG2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------- mixture model

@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    covariance_type: str = "full"
    log_likelihood: tuple = ()
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        mu = np.atleast_2d(np.asarray(self.means, float))
        S = np.asarray(self.covariances, float).reshape(len(w), mu.shape[1], mu.shape[1])
        if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
            raise ValueError("mixture weights must lie on the simplex")
        L = np.empty_like(S)
        for j in range(len(w)):
            L[j] = np.tril(cho_factor(S[j], lower=True)[0])
        for name, val in (("weights", w), ("means", mu), ("covariances", S), ("chol", L)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def component_logpdf(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        if X.shape[1] != self.d:
            raise DimensionMismatch(f"feature dimension {X.shape[1]} != {self.d}")
        out = np.empty((X.shape[0], self.K))
        for j in range(self.K):
            Z = solve_triangular(self.chol[j], (X - self.means[j]).T, lower=True)
            logdet = 2.0 * np.log(np.diag(self.chol[j])).sum()
            out[:, j] = -0.5 * (self.d * _LOG2PI + logdet + (Z * Z).sum(0))
        return out

    def score_samples(self, X) -> np.ndarray:
        """Log density of each row of X."""
        with np.errstate(divide="ignore"):
            return logsumexp(self.component_logpdf(X) + np.log(self.weights), axis=1)

    def to_dict(self) -> dict:
        return {
            "covariance_type": self.covariance_type,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "cholesky": self.chol.tolist(),
            "log_likelihood": list(self.log_likelihood),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        L = np.asarray(d["cholesky"], float)
        cov = L @ np.transpose(L, (0, 2, 1))
        return cls(np.asarray(d["weights"]), np.asarray(d["means"]), cov,
                   covariance_type=d.get("covariance_type", "full"),
                   log_likelihood=tuple(d.get("log_likelihood", ())))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GmmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def nlpd(G: GmmModel, phi) -> np.ndarray | float:
    """Negative log probability density; one value per row for a batch."""
    phi = np.asarray(phi, float)
    s = -G.score_samples(phi)
    return float(s[0]) if phi.ndim == 1 else s


def _floored(S: np.ndarray) -> np.ndarray:
    d = S.shape[0]
    eps = 1e-6 * np.trace(S) / d
    return S + max(eps, 1e-12) * np.eye(d)


def _kmeans_pp(X, K, rng) -> np.ndarray:
    N = X.shape[0]
    centres = [X[rng.integers(N)]]
    d2 = ((X - centres[0]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(N, p=d2 / total) if total > 0 else rng.integers(N)
        centres.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centres)


def _m_step(X, resp, covariance_type):
    Nk = resp.sum(0)
    w = Nk / Nk.sum()
    mu = (resp.T @ X) / Nk[:, None]
    d = X.shape[1]
    S = np.empty((len(Nk), d, d))
    for j in range(len(Nk)):
        C = X - mu[j]
        Sj = (resp[:, j, None] * C).T @ C / Nk[j]
        if covariance_type == "diag":
            Sj = np.diag(np.diag(Sj))
        S[j] = _floored(Sj)
    return w, mu, S


def fit_gmm(X, K: int, seed=0, max_iter: int = 500, tol: float = 1e-8,
            covariance_type: str = "full") -> GmmModel:
    """EM for a K-component Gaussian mixture, initialised by k-means++.

    Stops when the mean log-likelihood changes by less than ``tol`` relative,
    or after ``max_iter`` iterations. The per-iteration log-likelihood is kept
    on the returned model and checked to be non-decreasing.
    """
    X = np.atleast_2d(np.asarray(X, float))
    N, d = X.shape
    if N < K or K < 1:
        raise ValueError(f"need at least K = {K} samples, got {N}")
    if covariance_type not in ("full", "diag"):
        raise ValueError("covariance_type must be 'full' or 'diag'")
    rng = np.random.default_rng(seed)

    centres = _kmeans_pp(X, K, rng)
    hard = np.argmin(((X[:, None, :] - centres[None]) ** 2).sum(2), axis=1)
    resp = np.zeros((N, K))
    resp[np.arange(N), hard] = 1.0
    # guard against empty initial clusters
    resp = resp + 1e-12
    resp /= resp.sum(1, keepdims=True)
    w, mu, S = _m_step(X, resp, covariance_type)

    history: list[float] = []
    reseeded = False
    prev = -np.inf
    for _ in range(max_iter):
        model = GmmModel(w, mu, S, covariance_type)
        logp = model.component_logpdf(X) + np.log(w)
        lse = logsumexp(logp, axis=1)
        ll = float(lse.mean())
        history.append(ll)
        if ll < prev - 1e-9 * max(1.0, abs(prev)):
            raise RuntimeError(f"EM log-likelihood decreased: {prev!r} -> {ll!r}")
        if np.isfinite(prev) and abs(ll - prev) <= tol * max(abs(prev), 1e-300):
            break
        prev = ll
        resp = np.exp(logp - lse[:, None])
        Nk = resp.sum(0)
        dead = Nk < 1e-10 * N
        if dead.any():
            if reseeded:
                raise DegenerateComponent(f"components {np.flatnonzero(dead).tolist()} collapsed twice")
            reseeded = True
            w, mu, S = _m_step(X, resp + 1e-300, covariance_type)
            glob = _floored(np.cov(X.T, bias=True).reshape(d, d))
            for j in np.flatnonzero(dead):
                mu[j] = X[rng.integers(N)]
                S[j] = glob
                w[j] = 1.0 / K
            w = w / w.sum()
            prev = -np.inf
            continue
        w, mu, S = _m_step(X, resp, covariance_type)
    return GmmModel(w, mu, S, covariance_type, log_likelihood=tuple(history))


def select_k(features, heldout, candidates, seed=0, covariance_type: str = "full") -> int:
    """Candidate K with the highest held-out log-likelihood; ties go to the smaller K."""
    candidates = sorted(set(int(k) for k in candidates))
    if not candidates:
        raise ValueError("candidate list is empty")
    best_k, best_ll = candidates[0], -np.inf
    for K in candidates:
        G = fit_gmm(features, K, seed=seed, covariance_type=covariance_type)
        ll = float(G.score_samples(heldout).mean())
        if ll > best_ll:
            best_k, best_ll = K, ll
    return best_k


# ---------------------------------------------------------------- score histogram

@dataclass(frozen=True, eq=False)
class ScoreHistogram:
    edges: np.ndarray
    table: np.ndarray
    labels: np.ndarray
    t: int

    @property
    def Q(self) -> int:
        return len(self.labels)

    @property
    def s_min(self) -> float:
        return float(self.edges[0])

    @property
    def s_max(self) -> float:
        return float(self.edges[-1])

    def bin_index(self, scores) -> np.ndarray:
        """Interior edges belong to the bin on their right; s_max sits in the last bin."""
        idx = np.searchsorted(self.edges, scores, side="right") - 1
        return np.clip(idx, 0, self.Q - 1)

    def to_dict(self) -> dict:
        return {"t": self.t, "edges": self.edges.tolist(), "table": self.table.tolist(),
                "labels": self.labels.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreHistogram":
        return cls(np.asarray(d["edges"], float), np.asarray(d["table"], float),
                   np.asarray(d["labels"], np.int64), int(d["t"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ScoreHistogram":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _fill_empty(labels: np.ndarray, occupied: np.ndarray) -> np.ndarray:
    """Empty bins copy the nearest occupied bin; equal distance favours the larger index."""
    full = np.flatnonzero(occupied)
    out = labels.copy()
    for j in np.flatnonzero(~occupied):
        pos = np.searchsorted(full, j)
        left = full[pos - 1] if pos > 0 else None
        right = full[pos] if pos < full.size else None
        if right is not None and (left is None or right - j <= j - left):
            out[j] = labels[right]
        else:
            out[j] = labels[left]
    return out


def build_histogram(scores, labels, Q: int, t: int | None = None) -> ScoreHistogram:
    """Equal-width histogram of scores split by true label, with a majority label per bin.

    Labels above ``t`` are counted as ``t``. Ties within a bin go to the smaller label.
    """
    scores = np.asarray(scores, float).ravel()
    labels = np.asarray(labels, np.int64).ravel()
    if scores.size == 0 or scores.size != labels.size:
        raise ValueError("need matching non-empty score and label arrays")
    if Q < 1:
        raise ValueError("Q must be >= 1")
    if t is None:
        t = int(labels.max())
    labels = np.minimum(labels, t)
    edges = np.linspace(scores.min(), scores.max(), Q + 1)
    H = ScoreHistogram(edges, np.zeros((Q, t + 1)), np.zeros(Q, np.int64), t)
    counts = np.zeros((Q, t + 1))
    np.add.at(counts, (H.bin_index(scores), labels), 1.0)
    occupied = counts.sum(1) > 0
    lab = _fill_empty(counts.argmax(1), occupied)
    return ScoreHistogram(edges, counts / scores.size, lab, t)


def label_pool(H: ScoreHistogram, score) -> np.ndarray | int:
    s = np.asarray(score, float)
    out = H.labels[H.bin_index(s)]
    out = np.where(s < H.s_min, 0, np.where(s > H.s_max, H.t, out))
    return int(out) if out.ndim == 0 else out.astype(np.int64)


# ---------------------------------------------------------------- synthetic features

@dataclass(frozen=True)
class SyntheticFeatureConfig:
    """Features of a pool (or item) holding ``l`` outliers.

    Inlier features come from ``n_modes`` Gaussian blobs with unit spread and
    centres of norm ``mode_scale``. A feature with ``l`` outliers is shifted by
    ``separation * sqrt(l)`` along a fixed unit direction, so its expected
    squared distance from the inliers, and hence its score, grows linearly in l.
    """

    d: int = 64
    n_modes: int = 3
    mode_scale: float = 4.0
    spread: float = 1.0
    separation: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.n_modes < 1:
            raise ValueError("d and n_modes must be >= 1")


class FeatureGenerator:
    def __init__(self, cfg: SyntheticFeatureConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0xFEA7])
        C = rng.standard_normal((cfg.n_modes, cfg.d))
        self.centres = cfg.mode_scale * C / np.linalg.norm(C, axis=1, keepdims=True)
        u = rng.standard_normal(cfg.d)
        self.direction = u / np.linalg.norm(u)

    def sample(self, counts, rng: np.random.Generator) -> np.ndarray:
        counts = np.asarray(counts, float).ravel()
        modes = rng.integers(self.cfg.n_modes, size=counts.size)
        noise = self.cfg.spread * rng.standard_normal((counts.size, self.cfg.d))
        return self.centres[modes] + noise + (self.cfg.separation * np.sqrt(counts))[:, None] * self.direction


@dataclass(frozen=True, eq=False)
class OutlierModels:
    """Scorer/labeler pairs for pools (counts 0..t) and single items (binary)."""

    pool_gmm: GmmModel
    pool_hist: ScoreHistogram
    item_gmm: GmmModel
    item_hist: ScoreHistogram

    def pool_labels(self, features) -> np.ndarray:
        return label_pool(self.pool_hist, nlpd(self.pool_gmm, np.atleast_2d(features)))

    def item_labels(self, features) -> np.ndarray:
        return label_pool(self.item_hist, nlpd(self.item_gmm, np.atleast_2d(features)))


def calibrate_models(gen: FeatureGenerator, t: int, K: int = 3, Q: int = 500,
                     n_train: int = 4000, n_calib: int = 10_000, seed=0,
                     covariance_type: str = "full") -> OutlierModels:
    """Fit the mixtures on inlier features and the histograms on labelled ones.

    Calibration pools carry uniformly drawn outlier counts in 0..t; calibration
    items are outliers with probability one half.
    """
    rng = np.random.default_rng([int(seed), 0xCA1])
    pool_g = fit_gmm(gen.sample(np.zeros(n_train), rng), K, seed=seed, covariance_type=covariance_type)
    l_pool = rng.integers(0, t + 1, size=n_calib)
    pool_h = build_histogram(nlpd(pool_g, gen.sample(l_pool, rng)), l_pool, Q, t)
    item_g = fit_gmm(gen.sample(np.zeros(n_train), rng), K, seed=seed, covariance_type=covariance_type)
    l_item = rng.integers(0, 2, size=n_calib)
    item_h = build_histogram(nlpd(item_g, gen.sample(l_item, rng)), l_item, Q, 1)
    return OutlierModels(pool_g, pool_h, item_g, item_h)


def pool_confusion(true_counts, predicted, t: int) -> np.ndarray:
    """Row-normalised confusion of predicted against true pool labels (both clipped to t)."""
    C = np.zeros((t + 1, t + 1))
    np.add.at(C, (np.minimum(true_counts, t), np.minimum(predicted, t)), 1.0)
    rows = C.sum(1, keepdims=True)
    return np.divide(C, rows, out=np.zeros_like(C), where=rows > 0)


# ---------------------------------------------------------------- pipelines

def pooled_od_pipeline(M: PoolingMatrix, pool_features, G: GmmModel, H: ScoreHistogram,
                       decoder) -> np.ndarray:
    """Score each pool, map scores to counts, decode.

    ``decoder`` is a method name understood by ``pooledcs.decoders.decode`` or a
    callable taking (M, y). Binary group-testing decoders see binarised counts.
    """
    from .decoders import decode

    feats = np.asarray(pool_features, float)
    if feats.shape[0] != M.m:
        raise DimensionMismatch(f"expected {M.m} pool feature vectors, got {feats.shape[0]}")
    y = label_pool(H, nlpd(G, feats))
    if callable(decoder):
        return np.asarray(decoder(M, y))
    return decode(decoder, M, y).x


def dorfman_od_pipeline(pool_features, item_features, G1: GmmModel, H1: ScoreHistogram,
                        G2: GmmModel, H2: ScoreHistogram, g: int | None = None) -> DorfmanPlan:
    """Two-round outlier detection.

    ``pool_features`` has one row per group of ``g`` consecutive items (a single
    row means one group holding every item). A group labelled 0 clears all its
    items; otherwise each item is scored and labelled individually.
    """
    pool_features = np.atleast_2d(np.asarray(pool_features, float))
    item_features = np.atleast_2d(np.asarray(item_features, float))
    n = item_features.shape[0]
    if g is None:
        g = n
    n_groups = -(-n // g)
    if pool_features.shape[0] != n_groups:
        raise DimensionMismatch(f"expected {n_groups} group feature vectors")
    pool_verdicts = label_pool(H1, nlpd(G1, pool_features)) > 0

    def pool_oracle(groups):
        return pool_verdicts.astype(np.int8)

    def item_oracle(idx):
        return (label_pool(H2, nlpd(G2, item_features[idx])) > 0).astype(np.int8)

    return dorfman_decode(n, g, pool_oracle, item_oracle)
