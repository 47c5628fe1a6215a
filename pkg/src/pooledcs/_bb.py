"""Compiled kernel for the binary least-squares branch and bound in ``cs``."""
import numpy as np
from numba import njit

_EPS = 1e-9


@njit(cache=True)
def _pool_bound(mu, free, R, width, pen, want_mm, mm):
    """Sum over pools of min_S [sum_{i in S} mu_qi + |S|(|S|-1)] over free members.

    With ``want_mm`` also fills ``mm[q, k]``: the min-marginal of member k, i.e.
    best value with k chosen minus best value without it.
    """
    m = R.shape[0]
    total = 0.0
    vals = np.empty(width)
    pos = np.empty(width, np.int64)
    cs = np.empty(width + 1)
    for q in range(m):
        f = 0
        for k in range(width):
            if free[R[q, k]]:
                vals[f] = mu[q, k]
                pos[f] = k
                f += 1
        # insertion sort, f <= width is small
        for a in range(1, f):
            v = vals[a]
            p = pos[a]
            b = a - 1
            while b >= 0 and vals[b] > v:
                vals[b + 1] = vals[b]
                pos[b + 1] = pos[b]
                b -= 1
            vals[b + 1] = v
            pos[b + 1] = p
        cs[0] = 0.0
        for a in range(f):
            cs[a + 1] = cs[a] + vals[a]
        best = 0.0
        for s in range(1, f + 1):
            t = cs[s] + pen[s]
            if t < best:
                best = t
        total += best
        if want_mm:
            for k in range(width):
                mm[q, k] = 0.0
            for k in range(f):
                with_k = np.inf
                for s in range(1, f + 1):
                    t = (cs[s] if k < s else cs[s - 1] + vals[k]) + pen[s]
                    if t < with_k:
                        with_k = t
                without = np.inf
                for s in range(0, f):
                    t = (cs[s] if s <= k else cs[s + 1] - vals[k]) + pen[s]
                    if t < without:
                        without = t
                mm[q, pos[k]] = with_k - without
    return total


@njit(cache=True)
def _fix_one(i, ones, free, h, mu, W, ip_ptr, ip_q):
    free[i] = False
    ones[i] = True
    n = h.shape[0]
    for j in range(n):
        h[j] += W[i, j]
    for e in range(ip_ptr[i], ip_ptr[i + 1]):
        q = ip_q[e]
        for k in range(mu.shape[1]):
            mu[q, k] += 2.0


@njit(cache=True)
def _value(x, W, a, yy):
    n = a.shape[0]
    v = yy
    for i in range(n):
        if x[i]:
            v += a[i]
            for j in range(i + 1, n):
                if x[j]:
                    v += W[i, j]
    return v


@njit(cache=True)
def solve(W, a, yy, R, pen, cw, mu0, ip_ptr, ip_q, x0, max_nodes, steps):
    n = a.shape[0]
    m, width = R.shape
    depth = n + 2
    S_ones = np.zeros((depth, n), np.bool_)
    S_free = np.zeros((depth, n + 1), np.bool_)
    S_h = np.zeros((depth, n))
    S_base = np.zeros(depth)
    S_mu = np.zeros((depth, m, width))

    best_x = x0.copy()
    best_f = _value(best_x, W, a, yy)

    S_free[0, :n] = True
    S_h[0] = a
    S_base[0] = yy
    S_mu[0] = mu0
    top = 1
    nodes = 0
    optimal = True
    mm = np.zeros((m, width))
    acc = np.zeros(n + 1)
    upper = np.zeros(n)
    while top > 0:
        if nodes >= max_nodes:
            optimal = False
            break
        top -= 1
        ones = S_ones[top].copy()
        free = S_free[top].copy()
        h = S_h[top].copy()
        base = S_base[top]
        mu = S_mu[top].copy()
        nodes += 1

        # dominance fixing until nothing changes
        while True:
            changed = False
            nfree = 0
            for i in range(n):
                if free[i]:
                    if h[i] >= 0:
                        free[i] = False
                        changed = True
                    else:
                        nfree += 1
            if nfree == 0:
                break
            any_one = False
            for i in range(n):
                if free[i]:
                    u = h[i]
                    for j in range(n):
                        if free[j]:
                            u += W[i, j]
                    upper[i] = u
            for i in range(n):
                if free[i] and upper[i] < 0:
                    base += h[i]
                    _fix_one(i, ones, free, h, mu, W, ip_ptr, ip_q)
                    any_one = True
            if not (changed or any_one):
                break

        if base < best_f - _EPS:
            best_f = base
            for i in range(n):
                best_x[i] = ones[i]

        branch = -1
        hmin = 0.0
        for i in range(n):
            if free[i] and (branch < 0 or h[i] < hmin):
                branch = i
                hmin = h[i]
        if branch < 0:
            continue

        # lower bound with a few min-marginal averaging sweeps
        lb = -np.inf
        best_mu = mu.copy()
        for it in range(steps + 1):
            want = it < steps
            b = _pool_bound(mu, free, R, width, pen, want, mm)
            if b > lb:
                lb = b
                best_mu[:, :] = mu
            if base + lb >= best_f - _EPS or not want:
                break
            acc[:] = 0.0
            for q in range(m):
                for k in range(width):
                    acc[R[q, k]] += mm[q, k]
            for q in range(m):
                for k in range(width):
                    i = R[q, k]
                    if free[i]:
                        mu[q, k] += acc[i] / cw[i] - mm[q, k]
        if base + lb >= best_f - _EPS:
            continue

        # 0-branch below, 1-branch on top so it is explored first
        S_ones[top] = ones
        S_free[top] = free
        S_free[top, branch] = False
        S_h[top] = h
        S_base[top] = base
        S_mu[top] = best_mu
        top += 1
        o1 = ones.copy()
        f1 = free.copy()
        h1 = h.copy()
        mu1 = best_mu.copy()
        b1 = base + h[branch]
        _fix_one(branch, o1, f1, h1, mu1, W, ip_ptr, ip_q)
        S_ones[top] = o1
        S_free[top] = f1
        S_h[top] = h1
        S_base[top] = b1
        S_mu[top] = mu1
        top += 1
    return best_x, _value(best_x, W, a, yy), nodes, optimal
