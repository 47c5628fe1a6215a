import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pooledcs.errors import DimensionMismatch
from pooledcs.gt import (comp_decode, dorfman_decode, dorfman_groups, ncomp_decode,
                         optimal_dorfman_pool_size, perfect_oracles)
from pooledcs.matrix import PoolingMatrix, construct_balanced
from pooledcs.oracle import binarize_counts, exact_counts

TOY = PoolingMatrix.from_dense([[1, 1, 0], [0, 1, 1]])


def naive_comp(D, ybar):
    """Loop form of the rule: cleared iff some pool of the item is negative."""
    m, n = D.shape
    return np.array([0 if any(D[q, i] and not ybar[q] for q in range(m)) else 1 for i in range(n)])


def test_comp_examples(matrix_100):
    assert not comp_decode(matrix_100, np.zeros(50, int)).any()
    assert comp_decode(TOY, [1, 0]).tolist() == [1, 0, 0]
    with pytest.raises(DimensionMismatch):
        comp_decode(TOY, [1, 0, 1])


def test_comp_exact_for_sparse_inputs(matrix_100):
    for k in range(4):
        for S in itertools.islice(itertools.combinations(range(100), k), 0, None, 997):
            x = np.zeros(100, int)
            x[list(S)] = 1
            assert np.array_equal(comp_decode(matrix_100, binarize_counts(exact_counts(matrix_100, x))), x)


@given(st.integers(0, 2**32 - 1))
def test_comp_matches_loop_rule(seed):
    rng = np.random.default_rng(seed)
    D = (rng.random((5, 8)) < 0.4).astype(np.uint8)
    ybar = rng.integers(0, 2, 5)
    assert np.array_equal(comp_decode(PoolingMatrix.from_dense(D), ybar), naive_comp(D, ybar))


@given(st.integers(0, 2**32 - 1), st.integers(0, 30))
def test_comp_no_false_negatives_without_false_negative_pools(matrix_100, seed, k):
    rng = np.random.default_rng(seed)
    x = np.zeros(100, int)
    x[rng.choice(100, k, replace=False)] = 1
    ybar = binarize_counts(exact_counts(matrix_100, x))
    # spurious positives are allowed, missed positives are not
    ybar = ybar | (rng.random(50) < 0.2)
    assert np.all(comp_decode(matrix_100, ybar)[x == 1] == 1)


def test_ncomp_threshold_rules(matrix_100):
    M = matrix_100
    item = 17
    pools = M.cols[item]
    ybar = np.zeros(50, int)
    ybar[pools[:3]] = 1
    assert ncomp_decode(M, ybar, 2)[item] == 1
    assert ncomp_decode(M, ybar, 3)[item] == 0
    ybar[pools] = 1
    assert ncomp_decode(M, ybar, 3)[item] == 1
    with pytest.raises(ValueError):
        ncomp_decode(M, ybar, 4)


def test_ncomp2_tolerates_any_single_flip(matrix_100):
    M = matrix_100
    for i in range(100):
        x = np.zeros(100, int)
        x[i] = 1
        ybar = binarize_counts(exact_counts(M, x))
        for q in M.cols[i]:
            noisy = ybar.copy()
            noisy[q] = 0
            assert ncomp_decode(M, noisy, 2)[i] == 1


def test_ncomp_t0_agrees_with_comp_on_decided_items():
    for shape in [(9, 6, 3, 2), (12, 9, 4, 3), (16, 12, 4, 3)]:
        M = construct_balanced(*shape, seed=0)
        n = M.n
        for bits in range(0, 2**n, max(1, 2**n // 2000)):
            x = (bits >> np.arange(n)) & 1
            ybar = binarize_counts(exact_counts(M, x))
            pos = ybar @ M.dense.astype(int)
            comp = comp_decode(M, ybar)
            ncomp = ncomp_decode(M, ybar, M.c - 1)
            assert np.array_equal(comp, ncomp)
            # t = 0: flags anything with a positive pool, a superset of COMP's flags
            loose = ncomp_decode(M, ybar, 0)
            assert np.all(loose >= comp)
            allpos = pos == M.c
            assert np.array_equal(comp[allpos], loose[allpos])
            assert np.all(loose[pos == 0] == 0)


@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_ncomp_monotone_in_positive_pools(matrix_100, seed, t):
    rng = np.random.default_rng(seed)
    ybar = (rng.random(50) < 0.3).astype(int)
    before = ncomp_decode(matrix_100, ybar, t)
    more = ybar.copy()
    more[rng.integers(50)] = 1
    after = ncomp_decode(matrix_100, more, t)
    assert np.all(after >= before)


def test_batched_outcomes(matrix_100):
    rng = np.random.default_rng(0)
    Y = rng.integers(0, 2, (7, 50))
    batch = comp_decode(matrix_100, Y)
    assert batch.shape == (7, 100)
    for row, yb in zip(batch, Y):
        assert np.array_equal(row, comp_decode(matrix_100, yb))


def test_optimal_pool_size():
    assert optimal_dorfman_pool_size(100, 1) == 10
    assert optimal_dorfman_pool_size(57, 57) == 1
    assert optimal_dorfman_pool_size(64, 4) == 4


def worst_case_tests(n, k, g):
    return math.ceil(n / g) + k * g


def test_sqrt_rule_near_integer_optimum():
    for n, k in [(100, 1), (400, 4), (900, 9), (1000, 10)]:
        g = optimal_dorfman_pool_size(n, k)
        best = min(worst_case_tests(n, k, h) for h in range(1, n + 1))
        assert worst_case_tests(n, k, g) == best


def test_dorfman_two_sqrt_nk_bound():
    rng = np.random.default_rng(0)
    for _ in range(200):
        labels = np.zeros(100, int)
        labels[rng.integers(100)] = 1
        plan = dorfman_decode(labels, 10, *perfect_oracles(labels))
        assert plan.tests_used <= 20 == 2 * math.sqrt(100 * 1)
        assert np.array_equal(plan.verdicts, labels)


def test_dorfman_all_negative():
    labels = np.zeros(103, int)
    plan = dorfman_decode(labels, 10, *perfect_oracles(labels))
    assert plan.round1_tests == plan.tests_used == 11
    assert plan.round2_tests == 0


def test_dorfman_short_final_group():
    groups = dorfman_groups(103, 10)
    assert len(groups) == 11 and len(groups[-1]) == 3
    labels = np.zeros(103, int)
    labels[-1] = 1
    plan = dorfman_decode(labels, 10, *perfect_oracles(labels))
    assert plan.round2_tests == 3 and plan.verdicts[-1] == 1


@given(st.integers(1, 200), st.integers(1, 30), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_dorfman_perfect_oracles_exact(n, g, p, seed):
    labels = (np.random.default_rng(seed).random(n) < p).astype(int)
    plan = dorfman_decode(labels, g, *perfect_oracles(labels))
    assert np.array_equal(plan.verdicts, labels)
    assert plan.round1_tests == math.ceil(n / g)
    assert plan.tests_used <= n + math.ceil(n / g)


def test_dorfman_verdicts_ignore_retest_order():
    labels = np.array([0, 1, 1, 0, 0, 1, 0, 0])
    pool, _ = perfect_oracles(labels)

    def item(idx):
        order = np.argsort(-idx)
        out = np.empty(idx.size, int)
        out[order] = labels[idx[order]]
        return out

    plan = dorfman_decode(labels, 3, pool, item)
    assert np.array_equal(plan.verdicts, labels)
