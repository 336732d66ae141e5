"""Diagonal Gaussians, diagonal Gaussian mixtures and their divergences.

Everything here is plain numpy on immutable parameter carriers; the
differentiable counterparts used during training live in
:mod:`csrae.models`. All mixture sums are evaluated in the log domain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from . import _kernels

LOG_2PI = float(np.log(2.0 * np.pi))
VAR_FLOOR = 1e-8


def _logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


@dataclass(frozen=True)
class DiagGaussian:
    """Gaussian with diagonal covariance ``diag(var)``."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64)).copy()
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64)).copy()
        if mean.ndim != 1 or mean.shape != var.shape:
            raise ValueError(f"mean {mean.shape} and var {var.shape} must be equal-length vectors")
        if not np.all(var > 0):
            raise ValueError("variances must be strictly positive")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def from_logvar(cls, mean: ArrayLike, logvar: ArrayLike) -> "DiagGaussian":
        """Build from learned parameters, applying the variance floor."""
        return cls(mean, np.maximum(np.exp(np.asarray(logvar, dtype=np.float64)), VAR_FLOOR))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class DiagGMM:
    """Weighted mixture of :class:`DiagGaussian` components of equal dimension."""

    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64)).copy()
        if len(comps) == 0:
            raise ValueError("a mixture needs at least one component")
        if w.shape != (len(comps),):
            raise ValueError(f"{w.shape[0]} weights for {len(comps)} components")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ValueError(f"components have mixed dimensions {sorted(dims)}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_arrays(cls, weights: ArrayLike | None, means: ArrayLike, variances: ArrayLike) -> "DiagGMM":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        variances = np.atleast_2d(np.asarray(variances, dtype=np.float64))
        if means.shape != variances.shape:
            raise ValueError("means and variances must have the same shape")
        if weights is None:
            weights = np.full(means.shape[0], 1.0 / means.shape[0])
        return cls(weights, tuple(DiagGaussian(m, v) for m, v in zip(means, variances)))

    @classmethod
    def single(cls, g: DiagGaussian) -> "DiagGMM":
        return cls(np.ones(1), (g,))

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def variances(self) -> np.ndarray:
        return np.stack([c.var for c in self.components])

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "vars": self.variances.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DiagGMM":
        missing = {"weights", "means", "vars"} - set(doc)
        if missing:
            raise ValueError(f"mixture document lacks {sorted(missing)}")
        return cls.from_arrays(doc["weights"], doc["means"], doc["vars"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "DiagGMM":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class QuadratureSpec:
    """Composite Simpson rule on ``[lower, upper]`` with ``panels`` intervals."""

    lower: float
    upper: float
    panels: int

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("lower must be < upper")
        if self.panels < 2 or self.panels % 2:
            raise ValueError("panels must be even and >= 2")

    @classmethod
    def covering(cls, *mixtures: DiagGMM, n_std: float = 10.0, panels: int = 20000) -> "QuadratureSpec":
        means = np.concatenate([m.means.ravel() for m in mixtures])
        std = max(float(np.sqrt(m.variances.max())) for m in mixtures)
        return cls(float(means.min() - n_std * std), float(means.max() + n_std * std), panels)

    def grid(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.panels + 1)

    def weights(self) -> np.ndarray:
        h = (self.upper - self.lower) / self.panels
        w = np.ones(self.panels + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        return w * h / 3.0

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights(), values))

    def covers(self, mixture: DiagGMM, n_std: float = 8.0) -> bool:
        sd = np.sqrt(mixture.variances.ravel())
        mu = mixture.means.ravel()
        return bool(np.all(mu - n_std * sd >= self.lower) and np.all(mu + n_std * sd <= self.upper))


def _check_dims(a, b):
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def log_pdf(g: DiagGaussian, x: ArrayLike) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != g.mean.shape:
        raise ValueError(f"point of shape {x.shape} for a {g.dim}-dimensional Gaussian")
    return float(np.sum(-0.5 * np.log(2.0 * np.pi * g.var) - (x - g.mean) ** 2 / (2.0 * g.var)))


def gmm_log_pdf(p: DiagGMM, x: ArrayLike) -> np.ndarray:
    """Log density of a mixture at the rows of ``x`` (shape ``(n, D)``)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != p.dim:
        raise ValueError(f"points have dimension {x.shape[1]}, mixture has {p.dim}")
    comp = _kernels.pairwise_log_overlap(x, np.zeros_like(x), p.means, p.variances)
    return _logsumexp(comp + np.log(p.weights)[None, :], axis=1)


def gaussian_overlap(a: DiagGaussian, b: DiagGaussian) -> float:
    """``log N(mean_a | mean_b, diag(var_a + var_b))`` = ``log ∫ a(x) b(x) dx``."""
    _check_dims(a, b)
    s = a.var + b.var
    return float(np.sum(-0.5 * np.log(2.0 * np.pi * s) - (a.mean - b.mean) ** 2 / (2.0 * s)))


def product_of_gaussians(a: DiagGaussian, b: DiagGaussian) -> tuple[float, DiagGaussian]:
    """Write ``a(x) b(x)`` as ``exp(log_scale) * result(x)``."""
    _check_dims(a, b)
    prec = 1.0 / a.var + 1.0 / b.var
    mean = (a.mean / a.var + b.mean / b.var) / prec
    var = a.var * b.var / (a.var + b.var)
    return gaussian_overlap(a, b), DiagGaussian(mean, var)


def _log_cross(a: DiagGMM, b: DiagGMM) -> float:
    """``log ∫ a(x) b(x) dx`` for two mixtures."""
    z = _kernels.pairwise_log_overlap(a.means, a.variances, b.means, b.variances)
    lw = np.log(a.weights)[:, None] + np.log(b.weights)[None, :]
    return float(_logsumexp(z + lw))


def cs_divergence(q: DiagGMM, p: DiagGMM) -> float:
    """Closed-form Cauchy-Schwarz divergence between two diagonal mixtures.

    ``-log ∫qp + 0.5 log ∫q² + 0.5 log ∫p²``, with every Gaussian overlap
    using the summed variance of the two components involved.
    """
    _check_dims(q, p)
    return -_log_cross(q, p) + 0.5 * _log_cross(q, q) + 0.5 * _log_cross(p, p)


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> float:
    _check_dims(q, p)
    r = q.var / p.var
    return float(0.5 * np.sum(r + (q.mean - p.mean) ** 2 / p.var - 1.0 - np.log(r)))


def sample_gmm(p: DiagGMM, n: int, rng_seed=None, component: int | None = None):
    """Ancestral sampling. Returns ``(samples (n, D), component labels (n,))``."""
    if component is not None and not 0 <= component < p.n_components:
        raise IndexError(f"component {component} out of range for K={p.n_components}")
    rng = np.random.default_rng(rng_seed)
    if component is None:
        labels = rng.choice(p.n_components, size=n, p=p.weights)
    else:
        labels = np.full(n, component, dtype=np.int64)
    eps = rng.standard_normal((n, p.dim))
    x = p.means[labels] + np.sqrt(p.variances[labels]) * eps
    return x, labels.astype(np.int64)


def mc_kl(q: DiagGMM, p: DiagGMM, samples: int, rng_seed=None) -> float:
    """Monte-Carlo estimate of KL(q || p) from ``samples`` draws of q."""
    _check_dims(q, p)
    if samples < 1:
        raise ValueError("samples must be >= 1")
    x, _ = sample_gmm(q, samples, rng_seed)
    return float(np.mean(gmm_log_pdf(q, x) - gmm_log_pdf(p, x)))


def cs_divergence_quadrature_1d(q: DiagGMM, p: DiagGMM, spec: QuadratureSpec | None = None) -> float:
    """Simpson-rule evaluation of the three CS integrals for 1-D mixtures."""
    if q.dim != 1 or p.dim != 1:
        raise ValueError("quadrature oracle supports 1-D mixtures only")
    spec = spec or QuadratureSpec.covering(q, p)
    if not (spec.covers(q) and spec.covers(p)):
        raise ValueError("quadrature interval does not cover 8 standard deviations around every component")
    x = spec.grid()[:, None]
    dq = np.exp(gmm_log_pdf(q, x))
    dp = np.exp(gmm_log_pdf(p, x))
    return (-np.log(spec.integrate(dq * dp))
            + 0.5 * np.log(spec.integrate(dq * dq))
            + 0.5 * np.log(spec.integrate(dp * dp)))
