"""Quantitative decoders for y ~ Mx with x binary.

Both minimise F(x) = ||y - Mx||^2 + lam * sum(x). ``mip_decode`` does so
exactly over {0,1}^n by branch and bound, ``classo_decode`` over the box
[0,1]^n with accelerated projected gradient, followed by thresholding.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch
from .matrix import PoolingMatrix

DEFAULT_LAMBDA_GRID = (0.001, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0)
DEFAULT_TAU_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class DecoderConfig:
    lam: float = 0.1
    tau: float = 0.5
    max_nodes: int = 200_000
    max_iter: int = 10_000
    tol: float = 1e-10
    gap_tol: float = 1e-7
    diffusion_steps: int = 2

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lam must be >= 0")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.max_nodes < 1 or self.max_iter < 1:
            raise ValueError("solver budgets must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(**d)

    def with_(self, **kw) -> "DecoderConfig":
        return replace(self, **kw)


def _counts(M: PoolingMatrix, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != M.m:
        raise DimensionMismatch(f"count vector length {y.shape[-1]} != m = {M.m}")
    return y


def objective(M: PoolingMatrix, y, x, lam: float) -> float:
    y = np.asarray(y, float)
    x = np.asarray(x, float)
    res = y - M.dense @ x
    return float(res @ res + lam * x.sum())


# ---------------------------------------------------------------- MIP

@dataclass(frozen=True, eq=False)
class MipResult:
    x: np.ndarray
    objective: float
    optimal: bool
    nodes: int


class _BranchAndBound:
    """Depth-first branch and bound on the QUBO form of F.

    F(x) = |y|^2 + sum_i a_i x_i + sum_{i<j} W_ij x_i x_j with W = 2 offdiag(M'M) >= 0.
    Since W >= 0, an item whose reduced cost h_i is >= 0 can be fixed to 0, and one
    with h_i plus all its remaining couplings < 0 can be fixed to 1. The lower bound
    splits the linear term over pools (multipliers mu, one per pool/member) so that
    each pool becomes a small problem solved exactly by sorting; a few Jacobi sweeps
    on the min-marginals tighten the split. The search itself runs in ``_bb``.
    """

    def __init__(self, M: PoolingMatrix, y: np.ndarray, cfg: DecoderConfig):
        D = M.dense.astype(float)
        n = M.n
        self.cfg = cfg
        G = D.T @ D
        self.W = 2.0 * G
        np.fill_diagonal(self.W, 0.0)
        cw = np.diag(G).copy()
        self.a = cw + cfg.lam - 2.0 * (D.T @ y)
        self.yy = float(y @ y)
        self.cw = np.maximum(cw, 1.0)
        # pool members padded with a dummy item n that is never free
        width = max((len(row) for row in M.rows), default=0)
        self.R = np.full((M.m, max(width, 1)), n, dtype=np.int64)
        for q, row in enumerate(M.rows):
            self.R[q, :len(row)] = row
        s = np.arange(self.R.shape[1] + 1.0)
        self.pen = s * (s - 1.0)
        self.mu0 = 1.0 + cfg.lam / np.append(self.cw, 1.0)[self.R] - 2.0 * y[:, None]
        self.mu0[self.R == n] = 0.0
        self.ip_ptr = np.zeros(n + 1, dtype=np.int64)
        self.ip_ptr[1:] = np.cumsum([len(col) for col in M.cols])
        self.ip_q = (np.concatenate(M.cols) if n else np.zeros(0)).astype(np.int64)

    def greedy(self) -> np.ndarray:
        """Add the item with the most negative reduced cost until none is left."""
        x = np.zeros(len(self.a), dtype=np.bool_)
        h = self.a.copy()
        while x.size:
            hh = np.where(x, np.inf, h)
            i = int(np.argmin(hh))
            if hh[i] >= 0:
                break
            x[i] = True
            h += self.W[i]
        return x

    def solve(self) -> MipResult:
        from . import _bb

        x, f, nodes, optimal = _bb.solve(self.W, self.a, self.yy, self.R, self.pen, self.cw,
                                         self.mu0, self.ip_ptr, self.ip_q, self.greedy(),
                                         int(self.cfg.max_nodes), int(self.cfg.diffusion_steps))
        return MipResult(x=x.astype(np.int8), objective=float(f), optimal=bool(optimal), nodes=int(nodes))


def mip_decode(M: PoolingMatrix, y, cfg: DecoderConfig = DecoderConfig()) -> MipResult:
    """Exact minimiser of F over binary vectors.

    When the node budget runs out the best incumbent is returned with
    ``optimal=False``.
    """
    y = _counts(M, y)
    if y.ndim != 1:
        raise DimensionMismatch("mip_decode takes a single count vector")
    return _BranchAndBound(M, y, cfg).solve()


# ---------------------------------------------------------------- CLasso

@dataclass(frozen=True, eq=False)
class ClassoResult:
    relaxed: np.ndarray
    x: np.ndarray
    converged: np.ndarray | bool
    iterations: np.ndarray | int
    objective: np.ndarray | float


def lipschitz_bound(M: PoolingMatrix, iters: int = 50) -> float:
    """Upper bound on the largest eigenvalue of M'M.

    Power iteration produces a positive vector v; for a nonnegative matrix A,
    max_i (Av)_i / v_i bounds the spectral radius from above.
    """
    D = M.dense.astype(float)
    A = D.T @ D
    if not A.any():
        return 1.0
    v = np.ones(A.shape[0])
    for _ in range(iters):
        w = A @ v + 1e-12
        v = w / w.max()
    v = np.maximum(v, 1e-12)
    return float(np.max((A @ v) / v))


def _classo_batch(D, Y, lam, L, max_iter, tol, gap_tol):
    """MFISTA over the columns of Y (shape m x B); returns (X, F, iters, converged).

    A column stops once an accepted step changes F by at most ``tol`` relative
    and the Frank-Wolfe gap max_s <grad F(x), x - s> over the box, an upper
    bound on F(x) - min F, is at most ``gap_tol`` relative.
    """
    B = Y.shape[1]
    n = D.shape[1]
    step = 1.0 / L
    Dt = D.T

    def F(X, Yb):
        R = Yb - D @ X
        return (R * R).sum(0) + lam * X.sum(0)

    X = np.zeros((n, B))
    Z = X.copy()
    Fx = F(X, Y)
    t = 1.0
    iters = np.zeros(B, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    active = np.arange(B)
    for it in range(1, max_iter + 1):
        Ya = Y[:, active]
        V = Z[:, active]
        G = 2.0 * (Dt @ (D @ V - Ya))
        U = np.clip(V - step * (G + lam), 0.0, 1.0)
        Fu = F(U, Ya)
        Xa = X[:, active]
        Fa = Fx[active]
        accept = Fu <= Fa
        Xnew = np.where(accept, U, Xa)
        Fnew = np.where(accept, Fu, Fa)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Z[:, active] = Xnew + (t / t_next) * (U - Xnew) + ((t - 1.0) / t_next) * (Xnew - Xa)
        scale = np.maximum(np.abs(Fnew), 1.0)
        done = accept & (np.abs(Fa - Fnew) <= tol * scale)
        if done.any():
            cand = np.flatnonzero(done)
            Xc = Xnew[:, cand]
            grad = 2.0 * (Dt @ (D @ Xc - Ya[:, cand])) + lam
            gap = (grad * Xc).sum(0) - np.minimum(grad, 0.0).sum(0)
            done[cand] = gap <= gap_tol * scale[cand]
        X[:, active] = Xnew
        Fx[active] = Fnew
        iters[active] = it
        t = t_next
        if done.any():
            converged[active[done]] = True
            active = active[~done]
            if not active.size:
                break
    return X, Fx, iters, converged


def classo_relax(M: PoolingMatrix, Y, cfg: DecoderConfig = DecoderConfig(), L: float | None = None):
    """Box-constrained LASSO for one count vector or a batch (one per row)."""
    Y = _counts(M, Y)
    single = Y.ndim == 1
    Yb = np.atleast_2d(Y).T
    D = M.dense.astype(float)
    if L is None:
        L = 2.0 * lipschitz_bound(M)
    X, Fx, iters, conv = _classo_batch(D, Yb, cfg.lam, L, cfg.max_iter, cfg.tol, cfg.gap_tol)
    if single:
        return X[:, 0], float(Fx[0]), int(iters[0]), bool(conv[0])
    return X.T, Fx, iters, conv


def classo_decode(M: PoolingMatrix, y, cfg: DecoderConfig = DecoderConfig()) -> ClassoResult:
    relaxed, Fx, iters, conv = classo_relax(M, y, cfg)
    x = (relaxed > cfg.tau).astype(np.int8)
    return ClassoResult(relaxed=relaxed, x=x, converged=conv, iterations=iters, objective=Fx)


# ---------------------------------------------------------------- grid search

@dataclass
class GridPoint:
    lam: float
    tau: float
    sensitivity: float
    specificity: float

    @property
    def score(self) -> float:
        return self.sensitivity * self.specificity


@dataclass
class GridSearchResult:
    config: DecoderConfig
    points: list = field(default_factory=list)


def rates_with_default(truth, pred) -> tuple[float, float]:
    """Sensitivity and specificity, counting an empty class as perfectly handled."""
    truth = np.asarray(truth).astype(bool).ravel()
    pred = np.asarray(pred).astype(bool).ravel()
    pos = truth.sum()
    neg = truth.size - pos
    sens = (pred & truth).sum() / pos if pos else 1.0
    spec = (~pred & ~truth).sum() / neg if neg else 1.0
    return float(sens), float(spec)


def grid_search(M: PoolingMatrix, Y, X_true, method: str,
                lam_grid=DEFAULT_LAMBDA_GRID, tau_grid=DEFAULT_TAU_GRID,
                base: DecoderConfig = DecoderConfig()) -> GridSearchResult:
    """Pick (lam, tau) maximising sensitivity * specificity on validation chunks.

    ``Y`` holds one count vector per row and ``X_true`` the matching labels.
    Ties go to the larger lam, then the larger tau. The MIP decoder ignores
    tau, so only ``base.tau`` is evaluated for it.
    """
    if not len(lam_grid) or not len(tau_grid):
        raise ValueError("grids must be non-empty")
    Y = np.atleast_2d(_counts(M, Y))
    X_true = np.atleast_2d(X_true)
    points = []
    for lam in sorted(lam_grid):
        cfg = base.with_(lam=float(lam))
        if method == "classo":
            relaxed = classo_relax(M, Y, cfg)[0]
            for tau in sorted(tau_grid):
                sens, spec = rates_with_default(X_true, relaxed > tau)
                points.append(GridPoint(float(lam), float(tau), sens, spec))
        elif method == "mip":
            pred = np.array([mip_decode(M, y, cfg).x for y in Y])
            sens, spec = rates_with_default(X_true, pred)
            points.append(GridPoint(float(lam), base.tau, sens, spec))
        else:
            raise ValueError(f"grid search supports 'classo' and 'mip', not {method!r}")
    best = max(points, key=lambda g: (g.score, g.lam, g.tau))
    return GridSearchResult(config=base.with_(lam=best.lam, tau=best.tau), points=points)
