"""Single entry point for the non-adaptive decoders, on one chunk or a batch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cs import DecoderConfig, classo_decode, mip_decode
from .gt import comp_decode, ncomp_decode
from .matrix import PoolingMatrix
from .oracle import binarize_counts

NONADAPTIVE = ("classo", "mip", "comp", "ncomp")


@dataclass(frozen=True, eq=False)
class DecodeResult:
    x: np.ndarray
    ok: np.ndarray | bool
    """False where the solver ran out of budget (MIP nodes or CLasso iterations)."""


def decode(method: str, M: PoolingMatrix, y, cfg: DecoderConfig = DecoderConfig(),
           t: int = 2) -> DecodeResult:
    """Decode pool counts ``y`` (one vector or one per row).

    COMP and NCOMP see binarised counts; ``t`` is the NCOMP tolerance.
    """
    y = np.asarray(y)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    if method == "comp":
        X, ok = comp_decode(M, binarize_counts(Y)), np.ones(len(Y), bool)
    elif method == "ncomp":
        X, ok = ncomp_decode(M, binarize_counts(Y), t), np.ones(len(Y), bool)
    elif method == "classo":
        res = classo_decode(M, Y, cfg)
        X, ok = res.x, np.asarray(res.converged)
    elif method == "mip":
        out = [mip_decode(M, row, cfg) for row in Y]
        X = np.array([o.x for o in out], dtype=np.int8).reshape(len(Y), M.n)
        ok = np.array([o.optimal for o in out], bool)
    else:
        raise ValueError(f"unknown decoder {method!r}; expected one of {NONADAPTIVE}")
    X = np.asarray(X, np.int8)
    if single:
        return DecodeResult(X[0], bool(ok[0]))
    return DecodeResult(X, ok)
