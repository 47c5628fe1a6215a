"""Balanced binary pooling matrices and their combinatorial certificates.

A pooling matrix has ``m`` rows (pools) and ``n`` columns (items). Every row
holds ``r`` ones, every column ``c`` ones, and no two rows or two columns
overlap in more than one position.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BudgetExceeded, InfeasibleParameters

DEFAULT_RESTARTS = 10_000
DEFAULT_BUDGET = 10**7


@dataclass(frozen=True, eq=False)
class PoolingMatrix:
    """Immutable 0/1 matrix with declared row weight ``r`` and column weight ``c``.

    ``rows[q]`` lists the items in pool ``q``; ``cols[i]`` lists the pools that
    item ``i`` takes part in.
    """

    dense: np.ndarray
    r: int
    c: int
    seed: int | None = None
    rows: tuple = field(init=False, repr=False)
    cols: tuple = field(init=False, repr=False)

    def __post_init__(self):
        arr = np.array(self.dense, dtype=np.uint8, copy=True)
        if arr.ndim != 2:
            raise ValueError("pooling matrix must be two-dimensional")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("pooling matrix entries must be 0 or 1")
        arr.setflags(write=False)
        object.__setattr__(self, "dense", arr)
        object.__setattr__(self, "rows", tuple(np.flatnonzero(row) for row in arr))
        object.__setattr__(self, "cols", tuple(np.flatnonzero(col) for col in arr.T))

    @property
    def m(self) -> int:
        return self.dense.shape[0]

    @property
    def n(self) -> int:
        return self.dense.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dense.shape

    @classmethod
    def from_dense(cls, arr, seed=None) -> "PoolingMatrix":
        """Wrap an arbitrary 0/1 array, taking the most common row/column sums as r, c."""
        arr = np.asarray(arr)
        row_w = arr.sum(axis=1).astype(int)
        col_w = arr.sum(axis=0).astype(int)
        r = int(np.bincount(row_w).argmax()) if row_w.size else 0
        c = int(np.bincount(col_w).argmax()) if col_w.size else 0
        return cls(arr, r=r, c=c, seed=seed)

    @classmethod
    def identity(cls, n: int) -> "PoolingMatrix":
        return cls(np.eye(n, dtype=np.uint8), r=1, c=1, seed=None)

    def to_text(self) -> str:
        seed = "-" if self.seed is None else str(self.seed)
        lines = [f"{self.m} {self.n} {self.r} {self.c} {seed}"]
        lines.extend("".join("1" if v else "0" for v in row) for row in self.dense)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PoolingMatrix":
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty matrix file")
        head = lines[0].split()
        if len(head) != 5:
            raise ValueError("matrix header must be 'm n r c seed'")
        m, n, r, c = (int(v) for v in head[:4])
        seed = None if head[4] == "-" else int(head[4])
        body = lines[1:]
        if len(body) != m or any(len(row) != n for row in body):
            raise ValueError(f"matrix body does not match header {m}x{n}")
        if any(set(row) - {"0", "1"} for row in body):
            raise ValueError("matrix body must contain only 0/1 characters")
        arr = np.array([[ch == "1" for ch in row] for row in body], dtype=np.uint8)
        return cls(arr, r=r, c=c, seed=seed)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "PoolingMatrix":
        return cls.from_text(Path(path).read_text())


def construct_balanced(n: int, m: int, r: int, c: int, seed: int,
                       max_restarts: int = DEFAULT_RESTARTS) -> PoolingMatrix:
    """Randomised column-by-column construction of a balanced pooling matrix.

    Each new column picks ``c`` rows that still have spare capacity and that
    have never appeared together in an earlier column; a column that cannot be
    placed triggers a full restart.
    """
    if n * c != m * r:
        raise InfeasibleParameters(f"n*c = {n * c} differs from m*r = {m * r}")
    if not (1 <= r <= n and 1 <= c <= m):
        raise InfeasibleParameters("need 1 <= r <= n and 1 <= c <= m")
    rng = np.random.default_rng(seed)
    for _ in range(max_restarts):
        cols = _attempt(rng, n, m, r, c)
        if cols is not None:
            dense = np.zeros((m, n), dtype=np.uint8)
            for j, rows in enumerate(cols):
                dense[rows, j] = 1
            return PoolingMatrix(dense, r=r, c=c, seed=seed)
    raise InfeasibleParameters(
        f"no {m}x{n} matrix with r={r}, c={c} found in {max_restarts} restarts")


def _attempt(rng, n, m, r, c):
    capacity = np.full(m, r)
    paired = np.zeros((m, m), dtype=bool)
    cols = []
    for _ in range(n):
        rows = _pick_rows(rng, capacity, paired, c)
        if rows is None:
            return None
        cols.append(rows)
        capacity[rows] -= 1
        paired[np.ix_(rows, rows)] = True
    return cols


def _pick_rows(rng, capacity, paired, c):
    avail = np.flatnonzero(capacity > 0)
    if avail.size < c:
        return None
    # fullest-capacity rows first, random among equals
    order = avail[np.lexsort((rng.random(avail.size), -capacity[avail]))]
    chosen: list[int] = []

    def extend(start):
        if len(chosen) == c:
            return True
        for pos in range(start, order.size - (c - len(chosen)) + 1):
            row = order[pos]
            if any(paired[row, other] for other in chosen):
                continue
            chosen.append(row)
            if extend(pos + 1):
                return True
            chosen.pop()
        return False

    return np.sort(np.array(chosen)) if extend(0) else None


def verify_balanced(M: PoolingMatrix, require_compression: bool = False) -> bool:
    """True iff row/column weights match (r, c), n*c = m*r and pairwise overlaps are <= 1."""
    D = M.dense.astype(np.int64)
    if M.n * M.c != M.m * M.r:
        return False
    if not np.all(D.sum(axis=1) == M.r) or not np.all(D.sum(axis=0) == M.c):
        return False
    if require_compression and not M.m < M.n:
        return False
    return _max_offdiag(D @ D.T) <= 1 and _max_offdiag(D.T @ D) <= 1


def _max_offdiag(G) -> int:
    if G.shape[0] < 2:
        return 0
    G = G.copy()
    np.fill_diagonal(G, 0)
    return int(G.max())


def mutual_coherence(M: PoolingMatrix) -> int:
    """Largest dot product between two distinct columns (unnormalised)."""
    if M.n < 2:
        raise ValueError("mutual coherence needs at least two columns")
    D = M.dense.astype(np.int64)
    return _max_offdiag(D.T @ D)


def disjunctness_work(M: PoolingMatrix, d: int) -> int:
    """Number of candidate covers check_disjunctness would enumerate."""
    total = 0
    for j in range(M.n):
        u = len(_restricted_supports(M, j))
        total += sum(math.comb(u, s) for s in range(1, min(d, u) + 1))
    return total


def _restricted_supports(M: PoolingMatrix, j: int) -> list[int]:
    """Distinct, maximal traces of the other columns on the support of column j, as bitmasks."""
    target = M.cols[j]
    pos = {int(q): b for b, q in enumerate(target)}
    traces = set()
    for q in target:
        for k in M.rows[q]:
            if k == j:
                continue
            mask = 0
            for q2 in M.cols[k]:
                b = pos.get(int(q2))
                if b is not None:
                    mask |= 1 << b
            traces.add(mask)
    # a trace contained in another never helps a cover
    return [t for t in traces if not any(t != o and t & o == t for o in traces)]


def check_disjunctness(M: PoolingMatrix, d: int, budget: int = DEFAULT_BUDGET) -> bool:
    """Exact test that no column's support is covered by any ``d`` other columns.

    Only columns that intersect the tested column can contribute to a cover, so
    the search runs over their traces on that column's support.
    """
    if d < 1:
        raise ValueError("disjunctness order must be >= 1")
    work = disjunctness_work(M, d)
    if work > budget:
        raise BudgetExceeded(f"{work} covers to test exceeds budget {budget}")
    for j in range(M.n):
        full = (1 << len(M.cols[j])) - 1
        if full == 0:
            # an empty column is covered by anything
            if M.n > 1:
                return False
            continue
        traces = _restricted_supports(M, j)
        for size in range(1, min(d, len(traces)) + 1):
            for combo in itertools.combinations(traces, size):
                acc = 0
                for t in combo:
                    acc |= t
                if acc == full:
                    return False
    return True


@dataclass(frozen=True)
class Rip1Result:
    k: int
    delta: float
    epsilon: float
    expansion: dict
    """Worst measured expansion loss ``1 - |N(S)| / (c|S|)`` for each subset size."""


def check_rip1(M: PoolingMatrix, k: int, budget: int = DEFAULT_BUDGET) -> Rip1Result:
    """Certify RIP-1 of order 2k through vertex expansion of all column sets of size <= 2k.

    The measured worst expansion loss e over those sets gives, for the matrix
    scaled by 1 / (c (1 - 2e)), the bounds ||x|| <= ||Mx|| <= (1 + delta)||x||
    with delta = 2e / (1 - 2e). ``epsilon`` is the analytic expander parameter
    (k - 1) / (2c) of matrices with pairwise overlaps <= 1.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= 2 * M.c + 1:
        raise ValueError(f"k must be < 2c + 1 = {2 * M.c + 1}")
    top = min(2 * k, M.n)
    work = sum(math.comb(M.n, s) for s in range(1, top + 1))
    if work > budget:
        raise BudgetExceeded(f"{work} column subsets exceeds budget {budget}")
    expansion = {s: _worst_expansion(M, s) for s in range(1, top + 1)}
    worst = max(expansion.values())
    delta = math.inf if worst >= 0.5 else 2 * worst / (1 - 2 * worst)
    return Rip1Result(k=k, delta=delta, epsilon=(k - 1) / (2 * M.c), expansion=expansion)


def _column_words(M: PoolingMatrix) -> np.ndarray:
    words = (M.m + 63) // 64
    out = np.zeros((M.n, words), dtype=np.uint64)
    for i, rows in enumerate(M.cols):
        for q in rows:
            out[i, q // 64] |= np.uint64(1) << np.uint64(q % 64)
    return out


def _worst_expansion(M: PoolingMatrix, size: int) -> float:
    """max over column sets S with |S| = size of 1 - |N(S)| / sum of degrees in S."""
    words = _column_words(M)
    deg = np.array([len(c) for c in M.cols], dtype=np.int64)
    if size == 1:
        nb = np.bitwise_count(words).sum(axis=1)
        return float(np.max(1.0 - nb / np.maximum(deg, 1)))
    ii, jj = np.triu_indices(M.n, k=1)
    pair_words = words[ii] | words[jj]
    pair_deg = deg[ii] + deg[jj]
    # pairs are in lexicographic order: those with first index >= s form a suffix
    first = np.searchsorted(ii, np.arange(M.n + 1))
    worst = -np.inf
    for prefix in itertools.combinations(range(M.n), size - 2):
        start = prefix[-1] + 1 if prefix else 0
        lo = first[start]
        if lo >= ii.size:
            continue
        acc = np.zeros(words.shape[1], dtype=np.uint64)
        acc_deg = 0
        for i in prefix:
            acc |= words[i]
            acc_deg += deg[i]
        nb = np.bitwise_count(pair_words[lo:] | acc).sum(axis=1)
        loss = 1.0 - nb / np.maximum(pair_deg[lo:] + acc_deg, 1)
        worst = max(worst, float(loss.max()))
    return worst


def erdos_cardinality_bound(n: int, k: int, r: int) -> int:
    """Largest possible number of k-subsets of an n-set that form an r-cover-free family."""
    if not (1 <= r and 1 <= k <= n):
        raise ValueError("need 1 <= r and 1 <= k <= n")
    t = -(-k // r)
    return math.comb(n, t) // math.comb(k - 1, t - 1)


def qgt_lower_bound(n: int, k: int, quantitative: bool = False) -> int:
    """Counting lower bound on the number of tests needed to find k defectives among n."""
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    value = k * math.log2(n / k)
    if quantitative:
        value /= math.log2(k + 1)
    return max(0, math.ceil(value - 1e-9))


@dataclass(frozen=True)
class MatrixCertificate:
    balanced: bool
    disjunctness_order: int
    mutual_coherence: int
    rip1: dict | None
    erdos_bound_ok: bool
    disjunct_check: dict | None = None

    def passed(self) -> bool:
        if not self.balanced:
            return False
        if self.disjunct_check is not None and self.disjunct_check.get("result") is False:
            return False
        return self.erdos_bound_ok


def certify(M: PoolingMatrix, disjunct: int | None = None, rip1: int | None = None,
            budget: int = DEFAULT_BUDGET) -> MatrixCertificate:
    """Collect the properties of ``M`` into a certificate.

    Disjunctness defaults to the c - 1 lower bound that holds for balanced
    matrices; an explicit ``disjunct`` order is checked exhaustively.
    """
    balanced = verify_balanced(M)
    order = M.c - 1 if balanced else 0
    disjunct_check = None
    if disjunct is not None:
        try:
            ok = check_disjunctness(M, disjunct, budget=budget)
            disjunct_check = {"d": disjunct, "result": ok}
            if ok:
                order = max(order, disjunct)
        except BudgetExceeded as exc:
            disjunct_check = {"d": disjunct, "result": None, "error": str(exc)}
    rip = None
    if rip1 is not None:
        eps = (rip1 - 1) / (2 * M.c)
        try:
            res = check_rip1(M, rip1, budget=budget)
            rip = {"k": rip1, "delta": res.delta, "epsilon": res.epsilon}
        except BudgetExceeded as exc:
            rip = {"k": rip1, "delta": None, "epsilon": eps, "error": str(exc)}
    erdos_ok = True
    if order >= 1 and M.c >= 1 and M.c <= M.m:
        erdos_ok = M.n <= erdos_cardinality_bound(M.m, M.c, order)
    return MatrixCertificate(
        balanced=balanced,
        disjunctness_order=order,
        mutual_coherence=mutual_coherence(M) if M.n >= 2 else 0,
        rip1=rip,
        erdos_bound_ok=erdos_ok,
        disjunct_check=disjunct_check,
    )
