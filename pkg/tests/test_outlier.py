import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from pooledcs.decoders import decode
from pooledcs.errors import DimensionMismatch
from pooledcs.oracle import exact_counts
from pooledcs.outlier import (FeatureGenerator, GmmModel, ScoreHistogram, SyntheticFeatureConfig,
                              _fill_empty, build_histogram, calibrate_models, dorfman_od_pipeline,
                              fit_gmm, label_pool, nlpd, pool_confusion, pooled_od_pipeline,
                              select_k)


def naive_density(G, x):
    return sum(w * multivariate_normal(mu, S).pdf(x)
               for w, mu, S in zip(G.weights, G.means, G.covariances))


def random_spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T + d * np.eye(d)


@pytest.fixture(scope="module")
def calibrated():
    gen = FeatureGenerator(SyntheticFeatureConfig(d=16, seed=1))
    return gen, calibrate_models(gen, t=5, K=3, Q=500, n_train=3000, n_calib=10_000, seed=1)


@pytest.fixture(scope="module")
def separable():
    gen = FeatureGenerator(SyntheticFeatureConfig(d=8, spread=0.05, separation=40.0, seed=2))
    return gen, calibrate_models(gen, t=8, K=3, Q=200, n_train=1000, n_calib=6000, seed=2)


# ---------------------------------------------------------------- EM

def test_single_component_is_sample_moments():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((500, 4)) @ rng.standard_normal((4, 4)) + 3.0
    G = fit_gmm(X, 1, seed=0)
    S = np.cov(X.T, bias=True)
    S_floor = S + 1e-6 * np.trace(S) / 4 * np.eye(4)
    assert np.allclose(G.means[0], X.mean(0), atol=1e-8, rtol=0)
    assert np.allclose(G.covariances[0], S_floor, atol=1e-8, rtol=0)
    assert G.weights[0] == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(10))
def test_log_likelihood_never_decreases(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 5))
    X = rng.standard_normal((int(rng.integers(30, 300)), int(rng.integers(1, 6))))
    X[: len(X) // 2] += rng.normal(0, 3, X.shape[1])
    G = fit_gmm(X, K, seed=seed)
    ll = np.array(G.log_likelihood)
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[:-1]).clip(1))


def test_two_separated_clusters_recovered():
    rng = np.random.default_rng(5)
    centres = np.array([[0.0, 0.0, 0.0], [10.0, -5.0, 2.0]])
    X = np.vstack([rng.standard_normal((5000, 3)) + c for c in centres])
    G = fit_gmm(X, 2, seed=0)
    order = np.argsort(G.means[:, 0])
    assert np.abs(G.means[order] - centres).max() < 0.1
    assert np.allclose(G.weights, 0.5, atol=0.01)


def test_fit_is_deterministic_and_diag_option():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((200, 3))
    a, b = fit_gmm(X, 3, seed=4), fit_gmm(X, 3, seed=4)
    assert np.array_equal(a.means, b.means) and a.log_likelihood == b.log_likelihood
    D = fit_gmm(X, 2, seed=0, covariance_type="diag")
    for S in D.covariances:
        assert np.count_nonzero(S - np.diag(np.diag(S))) == 0


def test_fit_rejects_too_few_samples():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((2, 3)), 3)
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((5, 3)), 1, covariance_type="tied")


def test_select_k():
    rng = np.random.default_rng(2)
    X, Xh = rng.standard_normal((2000, 2)), rng.standard_normal((2000, 2))
    assert select_k(X, Xh, [1, 2, 3]) == 1
    assert select_k(X, Xh, [2]) == 2
    two = np.vstack([rng.standard_normal((1000, 2)) + 8, rng.standard_normal((1000, 2)) - 8])
    two_h = np.vstack([rng.standard_normal((1000, 2)) + 8, rng.standard_normal((1000, 2)) - 8])
    assert select_k(two, two_h, [1, 2]) == 2
    with pytest.raises(ValueError):
        select_k(X, Xh, [])


# ---------------------------------------------------------------- scores

def test_nlpd_at_mean():
    rng = np.random.default_rng(3)
    S = random_spd(rng, 5)
    mu = rng.standard_normal(5)
    G = GmmModel(np.array([1.0]), mu[None], S[None])
    expected = 2.5 * math.log(2 * math.pi) + 0.5 * np.linalg.slogdet(S)[1]
    assert nlpd(G, mu) == pytest.approx(expected, abs=1e-12)


@given(st.integers(0, 10_000))
def test_nlpd_matches_direct_summation(seed):
    rng = np.random.default_rng(seed)
    K, d = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    w = rng.dirichlet(np.ones(K))
    G = GmmModel(w, rng.standard_normal((K, d)), np.array([random_spd(rng, d) for _ in range(K)]))
    X = rng.standard_normal((5, d))
    direct = -np.log([naive_density(G, x) for x in X])
    assert np.allclose(nlpd(G, X), direct, rtol=0, atol=1e-10)


def test_nlpd_grows_along_a_ray():
    G = GmmModel(np.array([1.0]), np.zeros((1, 3)), 2.0 * np.eye(3)[None])
    u = np.array([1.0, -2.0, 0.5]) / np.linalg.norm([1.0, -2.0, 0.5])
    s = nlpd(G, np.outer(np.linspace(0, 10, 50), u))
    assert np.all(np.diff(s) > 0)


def test_nlpd_far_point_is_finite():
    G = GmmModel(np.array([0.5, 0.5]), np.array([[0.0], [1.0]]), np.ones((2, 1, 1)))
    assert np.isfinite(nlpd(G, np.array([1e4])))


def test_nlpd_dimension_check():
    G = GmmModel(np.array([1.0]), np.zeros((1, 2)), np.eye(2)[None])
    with pytest.raises(DimensionMismatch):
        nlpd(G, np.zeros(3))


def test_gmm_json_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    G = fit_gmm(rng.standard_normal((300, 3)), 2, seed=0)
    G.save(tmp_path / "g.json")
    H = GmmModel.load(tmp_path / "g.json")
    X = rng.standard_normal((10, 3))
    assert np.allclose(nlpd(G, X), nlpd(H, X), atol=1e-10)
    assert "cholesky" in json.loads((tmp_path / "g.json").read_text())


def test_gmm_rejects_bad_weights():
    with pytest.raises(ValueError):
        GmmModel(np.array([0.7, 0.7]), np.zeros((2, 1)), np.ones((2, 1, 1)))


# ---------------------------------------------------------------- histogram

def test_histogram_table_sums_to_one_and_single_label():
    rng = np.random.default_rng(0)
    s = rng.random(1000)
    H = build_histogram(s, np.full(1000, 3), Q=50, t=5)
    assert H.table.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(H.labels == 3)
    assert H.Q == 50 and H.s_min == s.min() and H.s_max == s.max()


@given(st.lists(st.tuples(st.floats(-50, 50), st.integers(0, 5)), min_size=1, max_size=200),
       st.integers(1, 40))
def test_histogram_reproduces_own_bin_majority(data, Q):
    s = np.array([a for a, _ in data])
    lab = np.array([b for _, b in data])
    H = build_histogram(s, lab, Q, t=5)
    assert H.table.sum() == pytest.approx(1.0)
    assert set(np.unique(H.labels)) <= set(range(6))
    idx = H.bin_index(s)
    for j in np.unique(idx):
        counts = np.bincount(lab[idx == j], minlength=6)
        assert np.all(label_pool(H, s[idx == j]) == np.argmax(counts))


def test_within_bin_tie_goes_to_smaller_label():
    H = build_histogram([0.0, 0.1, 1.0], [2, 1, 1], Q=1, t=2)
    assert H.labels[0] == 1
    H = build_histogram([0.0, 0.1, 1.0, 0.9], [2, 2, 0, 0], Q=1, t=2)
    assert H.labels[0] == 0


def test_empty_bin_equidistant_takes_larger_index():
    # three bins over [0.2, 3.0]: bin 0 holds label 1, bin 2 holds label 2, bin 1 is empty
    H = build_histogram([0.2, 2.5, 3.0], [1, 2, 2], Q=3, t=2)
    assert H.table[1].sum() == 0
    assert H.labels.tolist() == [1, 2, 2]
    assert label_pool(H, 1.5) == 2


def test_fill_empty_nearest_neighbour():
    occ = np.array([True, False, False, False, False, True])
    lab = np.array([3, 0, 0, 0, 0, 1])
    assert _fill_empty(lab, occ).tolist() == [3, 3, 3, 1, 1, 1]


def test_label_pool_boundaries():
    H = build_histogram([0.0, 1.0, 2.0, 3.0], [1, 1, 2, 2], Q=3, t=5)
    assert label_pool(H, H.s_max + 1) == 5
    assert label_pool(H, H.s_min - 1) == 0
    assert label_pool(H, H.s_max) == H.labels[-1]
    assert label_pool(H, H.s_min) == H.labels[0]
    # interior edge at 1.0 belongs to bin 1 (label 1: scores 1.0 only), edge at 2.0 to bin 2
    assert H.bin_index(np.array([1.0, 2.0])).tolist() == [1, 2]


def test_labels_above_t_saturate():
    H = build_histogram([0.0, 1.0], [7, 7], Q=2, t=3)
    assert np.all(H.labels == 3)


def test_histogram_json_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    H = build_histogram(rng.random(100), rng.integers(0, 3, 100), Q=10)
    H.save(tmp_path / "h.json")
    H2 = ScoreHistogram.load(tmp_path / "h.json")
    s = rng.random(50) * 1.4 - 0.2
    assert np.array_equal(label_pool(H, s), label_pool(H2, s))


def test_histogram_rejects_empty():
    with pytest.raises(ValueError):
        build_histogram([], [], Q=4)
    with pytest.raises(ValueError):
        build_histogram([1.0], [0], Q=0)


# ---------------------------------------------------------------- pipelines

def test_calibrated_confusion_is_band_dominated(calibrated):
    gen, models = calibrated
    rng = np.random.default_rng(9)
    l = rng.integers(0, 6, size=10_000)
    pred = models.pool_labels(gen.sample(l, rng))
    C = np.zeros((6, 6))
    np.add.at(C, (l, pred), 1)
    band = sum(C[i, j] for i in range(6) for j in range(6) if abs(i - j) <= 1)
    assert band / C.sum() >= 0.95
    P = pool_confusion(l, pred, 5)
    assert np.allclose(P.sum(1), 1.0)
    assert np.all(np.diag(P) > 0.5)


def test_pipeline_low_scores_give_zero(calibrated, matrix_100):
    gen, models = calibrated
    # points at the mixture means score far below any calibration pool
    feats = np.repeat(models.pool_gmm.means[:1], matrix_100.m, axis=0)
    assert np.all(label_pool(models.pool_hist, nlpd(models.pool_gmm, feats)) == 0)
    for method in ("comp", "ncomp", "mip", "classo"):
        x = pooled_od_pipeline(matrix_100, feats, models.pool_gmm, models.pool_hist, method)
        assert not x.any()


def test_separable_pipeline_matches_noiseless(separable, matrix_100):
    gen, models = separable
    rng = np.random.default_rng(3)
    for _ in range(30):
        x = np.zeros(100, np.int8)
        x[rng.choice(100, size=int(rng.integers(0, 4)), replace=False)] = 1
        y = exact_counts(matrix_100, x)
        feats = gen.sample(y, rng)
        assert np.array_equal(models.pool_labels(feats), y)
        for method in ("comp", "mip"):
            got = pooled_od_pipeline(matrix_100, feats, models.pool_gmm, models.pool_hist, method)
            assert np.array_equal(got, decode(method, matrix_100, y).x)


def test_pipeline_accepts_callable_and_checks_shape(separable, small_matrix):
    gen, models = separable
    rng = np.random.default_rng(0)
    feats = gen.sample(np.zeros(small_matrix.m), rng)
    out = pooled_od_pipeline(small_matrix, feats, models.pool_gmm, models.pool_hist,
                             lambda M, y: np.asarray(y) * 0 + 7)
    assert np.all(out == 7)
    with pytest.raises(DimensionMismatch):
        pooled_od_pipeline(small_matrix, feats[:-1], models.pool_gmm, models.pool_hist, "comp")


def test_dorfman_od_clean_pool_uses_no_item_tests(separable):
    gen, models = separable
    rng = np.random.default_rng(1)
    items = gen.sample(np.zeros(8), rng)
    pool = gen.sample([0], rng)
    m = models
    plan = dorfman_od_pipeline(pool, items, m.pool_gmm, m.pool_hist, m.item_gmm, m.item_hist)
    assert plan.round2_tests == 0 and not plan.verdicts.any()


def test_dorfman_od_flagged_pool_tests_every_item(separable):
    gen, models = separable
    rng = np.random.default_rng(2)
    truth = np.array([0, 1, 0, 0, 0, 0, 1, 0])
    items = gen.sample(truth, rng)
    pool = gen.sample([truth.sum()], rng)
    m = models
    plan = dorfman_od_pipeline(pool, items, m.pool_gmm, m.pool_hist, m.item_gmm, m.item_hist)
    assert plan.round2_tests == 8
    assert np.array_equal(plan.verdicts, truth)


def test_dorfman_od_multiple_groups(separable):
    gen, models = separable
    rng = np.random.default_rng(4)
    truth = np.zeros(12, np.int8)
    truth[5] = 1
    items = gen.sample(truth, rng)
    pools = gen.sample([0, 1, 0], rng)
    m = models
    plan = dorfman_od_pipeline(pools, items, m.pool_gmm, m.pool_hist, m.item_gmm, m.item_hist, g=4)
    assert plan.round1_tests == 3 and plan.round2_tests == 4
    assert np.array_equal(plan.verdicts, truth)
    with pytest.raises(DimensionMismatch):
        dorfman_od_pipeline(pools[:2], items, m.pool_gmm, m.pool_hist, m.item_gmm, m.item_hist, g=4)


def test_pipeline_deterministic(calibrated, matrix_100):
    gen, models = calibrated
    feats = [gen.sample(np.arange(50) % 3, np.random.default_rng(7)) for _ in range(2)]
    a = pooled_od_pipeline(matrix_100, feats[0], models.pool_gmm, models.pool_hist, "mip")
    b = pooled_od_pipeline(matrix_100, feats[1], models.pool_gmm, models.pool_hist, "mip")
    assert np.array_equal(a, b)
