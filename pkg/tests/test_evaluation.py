import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csrae import evaluation as E
from csrae import models as M
from test_models import conjugate_log_px, conjugate_model


def test_is_ll_exact_on_conjugate_model():
    _, enc, dec, prior = conjugate_model()
    x = np.array([[0.7], [-1.2], [2.5]])
    exact = conjugate_log_px(x[:, 0])
    np.testing.assert_allclose(E.importance_sampled_ll_per_example(enc, dec, prior, x, 1, rng_seed=0), exact,
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(E.importance_sampled_ll_per_example(enc, dec, prior, x, 37, rng_seed=1), exact,
                               rtol=0, atol=1e-12)


def test_is_ll_single_sample_equals_elbo(toy, rng):
    t = toy()
    x = rng.normal(size=(5, 2))
    noise = rng.standard_normal((1, 5, 2))
    est = E.importance_sampled_ll(t.enc, t.dec, t.prior, x, 1, noise=noise)
    elbo = M.elbo_loss(t.enc, t.dec, t.prior, x, 1.0, noise[0], kl_estimate="sample").loss.item()
    assert est == pytest.approx(-elbo, abs=1e-12)


def test_is_ll_monotone_in_samples(toy, rng):
    t = toy()
    x = rng.normal(size=(10, 2))
    means = [np.mean([E.importance_sampled_ll(t.enc, t.dec, t.prior, x, s, rng_seed=seed) for seed in range(5)])
             for s in (10, 100, 1000)]
    assert means[0] < means[1] < means[2]


def test_is_ll_order_invariant_and_chunked(toy, rng):
    t = toy(prior="mog", K=3)
    x = rng.normal(size=(4, 2))
    noise = rng.standard_normal((30, 4, 2))
    a = E.importance_sampled_ll_per_example(t.enc, t.dec, t.prior, x, 30, noise=noise)
    b = E.importance_sampled_ll_per_example(t.enc, t.dec, t.prior, x, 30, noise=noise[::-1])
    c = E.importance_sampled_ll_per_example(t.enc, t.dec, t.prior, x, 30, noise=noise, max_rows=8)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a, c, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        E.importance_sampled_ll(t.enc, t.dec, t.prior, x, 0)
    with pytest.raises(ValueError):
        E.importance_sampled_ll(t.enc, t.dec, t.prior, x, 3, noise=noise)


def test_latent_embed(toy, rng):
    t = toy()
    x = rng.normal(size=(25, 2))
    a = E.latent_embed(t.enc, x, batch_size=7)
    assert a.shape == (25, 2)
    np.testing.assert_array_equal(a, M.encode(t.enc, x).mu.data)
    np.testing.assert_array_equal(a, E.latent_embed(t.enc, x))
    s1 = E.latent_embed(t.enc, x, sample=True, rng_seed=3)
    assert not np.allclose(s1, a)
    np.testing.assert_array_equal(s1, E.latent_embed(t.enc, x, sample=True, rng_seed=3))


def test_knn_examples(rng):
    assert np.all(E.knn_classify(np.array([[0.0, 0.0]]), [4], rng.normal(size=(10, 2)), 1) == 4)
    train = rng.normal(size=(20, 2))
    labels = rng.integers(0, 3, 20)
    np.testing.assert_array_equal(E.knn_classify(train, labels, train, 1), labels)
    with pytest.raises(ValueError):
        E.knn_classify(train, labels, train, 0)


@given(st.integers(0, 10_000))
def test_knn_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    train, query = rng.normal(size=(40, 2)), rng.normal(size=(15, 2))
    labels = rng.integers(0, 4, 40)
    perm = rng.permutation(4)
    a = E.knn_classify(train, labels, query, 5)
    b = E.knn_classify(train, perm[labels], query, 5)
    # vote ties fall back to mean distance, which ignores label values; with continuous
    # features exact distance ties (the only label-order fallback) have probability zero
    np.testing.assert_array_equal(perm[a], b)
    truth = rng.integers(0, 4, 15)
    assert E.classification_error(a, truth) == E.classification_error(b, perm[truth])


def test_error_and_f1():
    assert E.classification_error([1, 2, 3], [1, 2, 3]) == 0.0
    assert E.f1_score([1, 0, 1], [1, 0, 1]) == 1.0
    # TP=1, FP=1, FN=1
    assert E.f1_score([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)
    assert E.f1_score([0, 0, 0], [1, 0, 1]) == 0.0
    with pytest.raises(ValueError):
        E.classification_error([1, 2], [1])
    with pytest.raises(ValueError):
        E.f1_score([1], [1, 0])


def test_feature_stats_validation(rng):
    with pytest.raises(ValueError):
        E.FeatureStats(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]))
    with pytest.raises(ValueError):
        E.FeatureStats(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        E.FeatureStats(np.zeros(3), np.eye(2))
    with pytest.raises(ValueError):
        E.FeatureStats.fit(np.zeros((1, 3)))
    f = rng.normal(size=(500, 3))
    s = E.FeatureStats.fit(f)
    np.testing.assert_allclose(s.cov, np.cov(f, rowvar=False), atol=1e-14)


def test_frechet_examples(rng):
    one = E.FeatureStats(np.array([0.0]), np.array([[1.0]]))
    shifted = E.FeatureStats(np.array([3.0]), np.array([[1.0]]))
    assert E.frechet_distance(one, shifted) == pytest.approx(9.0, abs=1e-12)
    s = E.FeatureStats.fit(rng.normal(size=(200, 4)))
    assert abs(E.frechet_distance(s, s)) < 1e-8
    ca, cb = rng.uniform(0.1, 3, 5), rng.uniform(0.1, 3, 5)
    ma, mb = rng.normal(size=5), rng.normal(size=5)
    closed = np.sum((ma - mb) ** 2) + np.sum((np.sqrt(ca) - np.sqrt(cb)) ** 2)
    got = E.frechet_distance(E.FeatureStats(ma, np.diag(ca)), E.FeatureStats(mb, np.diag(cb)))
    assert got == pytest.approx(closed, abs=1e-8)
    with pytest.raises(ValueError):
        E.frechet_distance(one, s)


@given(st.integers(0, 10_000))
def test_frechet_symmetric_and_matches_scipy(seed):
    from scipy.linalg import sqrtm
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    a = E.FeatureStats.fit(rng.normal(size=(50, d)) @ rng.normal(size=(d, d)))
    b = E.FeatureStats.fit(rng.normal(size=(50, d)) + rng.normal(size=d))
    ab, ba = E.frechet_distance(a, b), E.frechet_distance(b, a)
    assert abs(ab - ba) < 1e-8
    ref = np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov - 2 * np.real(sqrtm(a.cov @ b.cov)))
    assert ab == pytest.approx(ref, abs=1e-6)
