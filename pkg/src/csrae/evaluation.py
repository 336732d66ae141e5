"""Evaluation metrics: importance-sampled log-likelihood, kNN, error/F1, Fréchet distance.

The Fréchet distance here operates on whatever feature matrices the
caller supplies (pixels, latent codes); it is not comparable with
published FID values, which use Inception-network features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .gmm import _logsumexp
from .models import encode, iwae_log_weights

SYM_TOL = 1e-10
PSD_TOL = 1e-8


def importance_sampled_ll_per_example(enc, dec, prior, x, S: int, rng_seed=None, noise=None,
                                      max_rows: int = 200_000) -> np.ndarray:
    """``log (1/S) sum_s p(x|z_s) p(z_s) / q(z_s|x)`` per row of ``x`` with ``z_s ~ q(z|x)``.

    Noise is drawn as one ``(S, B, D)`` block from ``rng_seed`` unless given;
    evaluation is chunked over samples to bound memory.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b, d = x.shape[0], enc.latent_dim
    if noise is None:
        noise = np.random.default_rng(rng_seed).standard_normal((S, b, d))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (S, b, d):
        raise ValueError(f"noise must have shape {(S, b, d)}")
    step = max(1, max_rows // max(b, 1))
    logw = np.concatenate([iwae_log_weights(enc, dec, prior, x, noise[i:i + step]).data
                           for i in range(0, S, step)], axis=0)
    return _logsumexp(logw, axis=0) - np.log(S)


def importance_sampled_ll(enc, dec, prior, x, S: int, rng_seed=None, noise=None) -> float:
    """Batch mean of :func:`importance_sampled_ll_per_example`."""
    return float(np.mean(importance_sampled_ll_per_example(enc, dec, prior, x, S, rng_seed, noise)))


def latent_embed(enc, data, sample: bool = False, rng_seed=None, batch_size: int = 1000) -> np.ndarray:
    """Posterior means (or one posterior sample each with ``sample=True``) for every row."""
    x = getattr(data, "features", data)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rng = np.random.default_rng(rng_seed) if sample else None
    out = []
    for i in range(0, x.shape[0], batch_size):
        q = encode(enc, x[i:i + batch_size])
        z = q.mu.data
        if sample:
            z = z + np.sqrt(q.var.data) * rng.standard_normal(z.shape)
        out.append(z)
    return np.concatenate(out, axis=0) if out else np.zeros((0, enc.latent_dim))


def knn_classify(train_embed, train_labels, query_embed, k: int) -> np.ndarray:
    """Euclidean k-nearest-neighbour majority vote.

    Ties in the vote go to the class with the smaller mean distance among
    its voters, then to the smaller label; equidistant neighbours are
    ordered by training index.
    """
    return _kernels.knn_predict(train_embed, train_labels, query_embed, k)


def _pair(pred, truth):
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {truth.size} targets")
    return pred, truth


def classification_error(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    if pred.size == 0:
        raise ValueError("no predictions")
    return float(np.mean(pred != truth))


def f1_score(pred, truth) -> float:
    """Binary F1 with label 1 as the positive class; 0 when precision + recall is 0."""
    pred, truth = _pair(pred, truth)
    tp = float(np.sum((pred == 1) & (truth == 1)))
    fp = float(np.sum((pred == 1) & (truth != 1)))
    fn = float(np.sum((pred != 1) & (truth == 1)))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2.0 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class FeatureStats:
    """Mean and covariance of a Gaussian fitted to feature vectors."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        c = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if c.shape != (m.size, m.size):
            raise ValueError(f"covariance {c.shape} does not match mean of length {m.size}")
        if np.max(np.abs(c - c.T)) > SYM_TOL:
            raise ValueError("covariance is not symmetric")
        if m.size and _kernels.jacobi_eigh(c)[0][0] < -PSD_TOL:
            raise ValueError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @classmethod
    def fit(cls, features) -> "FeatureStats":
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if f.shape[0] < 2:
            raise ValueError("need at least two feature vectors")
        c = np.cov(f, rowvar=False)
        return cls(f.mean(axis=0), 0.5 * (np.atleast_2d(c) + np.atleast_2d(c).T))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = _kernels.jacobi_eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``||m_a - m_b||^2 + Tr(C_a + C_b - 2 (C_a C_b)^{1/2})``.

    The trace of the product root is taken as the sum of square roots of
    the eigenvalues of ``C_a^{1/2} C_b C_a^{1/2}``; round-off negatives are
    clamped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("feature dimensions differ")
    root = _psd_sqrt(a.cov)
    m = root @ b.cov @ root
    w, _ = _kernels.jacobi_eigh(0.5 * (m + m.T))
    tr_cross = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_cross)
