import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csrae.gmm import (DiagGaussian, DiagGMM, QuadratureSpec, cs_divergence, cs_divergence_quadrature_1d,
                       gaussian_overlap, gmm_log_pdf, kl_diag_gaussians, log_pdf, mc_kl, product_of_gaussians,
                       sample_gmm)

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def N(m, v):
    return DiagGaussian(np.atleast_1d(m), np.atleast_1d(v))


def single(m, v):
    return DiagGMM.single(N(m, v))


@st.composite
def mixtures(draw, dim=1, max_k=5):
    k = draw(st.integers(1, max_k))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(k))
    w = w / w.sum()
    return DiagGMM.from_arrays(w, rng.uniform(-4, 4, (k, dim)), rng.uniform(0.1, 3.0, (k, dim)))


# -- types ---------------------------------------------------------------------------

def test_diag_gaussian_validation():
    with pytest.raises(ValueError):
        DiagGaussian([0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        DiagGaussian([0.0], [0.0])
    g = DiagGaussian.from_logvar([0.0], [-100.0])
    assert g.var[0] == pytest.approx(1e-8)
    with pytest.raises(ValueError):
        g.mean[0] = 3.0


def test_mixture_validation():
    with pytest.raises(ValueError):
        DiagGMM(np.array([]), ())
    with pytest.raises(ValueError):
        DiagGMM([0.5, 0.6], (N(0, 1), N(1, 1)))
    with pytest.raises(ValueError):
        DiagGMM([0.5, 0.5], (N(0, 1), DiagGaussian([0, 0], [1, 1])))


def test_mixture_json_round_trip(tmp_path):
    p = DiagGMM.from_arrays([0.25, 0.75], [[0.0, 1.0], [2.0, -1.0]], [[1.0, 2.0], [0.5, 0.5]])
    p.save(tmp_path / "p.json")
    doc = json.loads((tmp_path / "p.json").read_text())
    assert set(doc) == {"weights", "means", "vars"}
    q = DiagGMM.load(tmp_path / "p.json")
    np.testing.assert_array_equal(q.means, p.means)
    np.testing.assert_array_equal(q.variances, p.variances)
    np.testing.assert_array_equal(q.weights, p.weights)


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        QuadratureSpec(1.0, 0.0, 10)
    with pytest.raises(ValueError):
        QuadratureSpec(0.0, 1.0, 3)
    assert QuadratureSpec(0.0, 1.0, 2).integrate(np.array([0.0, 0.25, 1.0])) == pytest.approx(1 / 3)


# -- densities and products --------------------------------------------------------

def test_log_pdf_examples():
    assert log_pdf(N(0, 1), [0.0]) == pytest.approx(-HALF_LOG_2PI, abs=1e-12)
    assert log_pdf(N(0, 1), [1.0]) == pytest.approx(-HALF_LOG_2PI - 0.5, abs=1e-12)
    assert log_pdf(DiagGaussian([0, 0], [1, 1]), [0, 0]) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    with pytest.raises(ValueError):
        log_pdf(N(0, 1), [0.0, 1.0])


def test_gaussian_overlap_examples():
    assert gaussian_overlap(N(0, 0.5), N(0, 0.5)) == pytest.approx(-HALF_LOG_2PI, abs=1e-12)
    expected = -0.5 * np.log(4 * np.pi) - 9 / 4
    assert gaussian_overlap(N(0, 1), N(3, 1)) == pytest.approx(expected, abs=1e-12)
    assert gaussian_overlap(N(3, 1), N(0, 1)) == gaussian_overlap(N(0, 1), N(3, 1))
    with pytest.raises(ValueError):
        gaussian_overlap(N(0, 1), DiagGaussian([0, 0], [1, 1]))


def test_product_of_gaussians_examples():
    s, r = product_of_gaussians(N(0, 1), N(0, 1))
    assert s == pytest.approx(np.log(1 / (2 * np.sqrt(np.pi))), abs=1e-12)
    assert r.mean[0] == 0.0 and r.var[0] == pytest.approx(0.5)
    _, r = product_of_gaussians(N(1.7, 0.3), N(1.7, 0.3))
    assert r.mean[0] == pytest.approx(1.7)


@given(st.integers(0, 10_000))
def test_product_pointwise_identity(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    a = DiagGaussian(rng.normal(size=d), rng.uniform(0.2, 3, d))
    b = DiagGaussian(rng.normal(size=d), rng.uniform(0.2, 3, d))
    s, r = product_of_gaussians(a, b)
    for x in rng.normal(size=(10, d)):
        lhs = np.exp(log_pdf(a, x) + log_pdf(b, x))
        rhs = np.exp(s) * np.exp(log_pdf(r, x))
        assert abs(lhs - rhs) < 1e-10


def test_gmm_log_pdf_matches_direct_sum(rng):
    p = DiagGMM.from_arrays([0.2, 0.8], [[0.0], [2.0]], [[1.0], [0.5]])
    x = rng.normal(size=(7, 1))
    direct = np.log(0.2 * np.exp([log_pdf(p.components[0], xi) for xi in x])
                    + 0.8 * np.exp([log_pdf(p.components[1], xi) for xi in x]))
    np.testing.assert_allclose(gmm_log_pdf(p, x), direct, rtol=1e-12)


# -- divergences ---------------------------------------------------------------------

def test_cs_single_gaussian_analytic():
    assert cs_divergence(single(0, 1), single(3, 1)) == pytest.approx(2.25, abs=1e-9)
    assert cs_divergence_quadrature_1d(single(0, 1), single(3, 1)) == pytest.approx(2.25, abs=1e-6)


def test_cs_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        cs_divergence(single(0, 1), DiagGMM.single(DiagGaussian([0, 0], [1, 1])))


@given(mixtures(), mixtures())
def test_cs_symmetric_and_nonnegative(q, p):
    a, b = cs_divergence(q, p), cs_divergence(p, q)
    assert abs(a - b) < 1e-10
    assert a >= -1e-10


@given(mixtures(dim=3))
def test_cs_self_divergence_zero(p):
    assert abs(cs_divergence(p, p)) < 1e-10


@given(mixtures(), mixtures())
def test_cs_matches_quadrature(q, p):
    exact = cs_divergence(q, p)
    quad = cs_divergence_quadrature_1d(q, p)
    assert abs(exact - quad) <= 1e-6 * max(abs(exact), 1e-3)


@given(st.integers(0, 10_000))
def test_cs_dimension_additivity(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 6))
    mq, mp = rng.normal(size=d), rng.normal(size=d)
    vq, vp = rng.uniform(0.2, 3, d), rng.uniform(0.2, 3, d)
    joint = cs_divergence(DiagGMM.single(DiagGaussian(mq, vq)), DiagGMM.single(DiagGaussian(mp, vp)))
    parts = sum(cs_divergence(single(mq[i], vq[i]), single(mp[i], vp[i])) for i in range(d))
    assert abs(joint - parts) < 1e-10


def test_cs_is_not_a_metric():
    # triangle inequality fails; triple found by random search over 1-D Gaussians
    a, b, c = single(0.57, 0.81), single(-0.65, 1.8), single(-1.64, 1.32)
    assert cs_divergence(a, c) > cs_divergence(a, b) + cs_divergence(b, c) + 0.5


def test_cs_log_domain_survives_high_dimension():
    d = 400
    q = DiagGMM.from_arrays(None, np.zeros((2, d)), np.full((2, d), 0.01))
    p = DiagGMM.from_arrays(None, np.ones((3, d)), np.full((3, d), 0.01))
    assert np.isfinite(cs_divergence(q, p))


def test_quadrature_requires_coverage():
    spec = QuadratureSpec(-2.0, 2.0, 100)
    with pytest.raises(ValueError):
        cs_divergence_quadrature_1d(single(0, 1), single(0, 1), spec)
    with pytest.raises(ValueError):
        cs_divergence_quadrature_1d(DiagGMM.single(DiagGaussian([0, 0], [1, 1])),
                                    DiagGMM.single(DiagGaussian([0, 0], [1, 1])))


def test_quadrature_identity_case():
    assert abs(cs_divergence_quadrature_1d(single(0, 1), single(0, 1))) < 1e-8


def test_kl_examples():
    assert kl_diag_gaussians(N(0, 1), N(0, 1)) == 0.0
    assert kl_diag_gaussians(N(1, 1), N(0, 1)) == pytest.approx(0.5)
    assert kl_diag_gaussians(N(0, 4), N(0, 1)) == pytest.approx(0.5 * (4 - 1 - np.log(4)))


@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    d = 3
    assert kl_diag_gaussians(DiagGaussian(rng.normal(size=d), rng.uniform(0.1, 3, d)),
                             DiagGaussian(rng.normal(size=d), rng.uniform(0.1, 3, d))) >= 0


def test_mc_kl():
    p = DiagGMM.from_arrays([0.5, 0.5], [[-3.0], [3.0]], [[1.0], [1.0]])
    assert abs(mc_kl(p, p, 100_000, rng_seed=0)) < 0.02
    assert mc_kl(single(1, 1), single(0, 1), 200_000, rng_seed=1) == pytest.approx(0.5, abs=0.01)
    assert mc_kl(p, single(0, 2), 1000, rng_seed=3) == mc_kl(p, single(0, 2), 1000, rng_seed=3)


def test_sample_gmm():
    x, lab = sample_gmm(single(0, 1), 0, rng_seed=0)
    assert x.shape == (0, 1) and lab.shape == (0,)
    x, _ = sample_gmm(single(0, 1), 100_000, rng_seed=0)
    assert abs(x.mean()) < 0.02 and abs(x.var() - 1) < 0.02
    p = DiagGMM.from_arrays(None, [[-5.0], [5.0]], [[1.0], [1.0]])
    _, lab = sample_gmm(p, 100_000, rng_seed=0)
    assert abs(lab.mean() - 0.5) < 0.01
    x, lab = sample_gmm(p, 500, rng_seed=0, component=1)
    assert np.all(lab == 1) and x.mean() > 4
    with pytest.raises(IndexError):
        sample_gmm(p, 5, component=2)
    np.testing.assert_array_equal(sample_gmm(p, 10, rng_seed=4)[0], sample_gmm(p, 10, rng_seed=4)[0])
