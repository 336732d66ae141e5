"""Encoders, decoders, priors and the training objectives.

Every objective returns batch means; ``recon`` is the expected
reconstruction log-likelihood ``E_q[log p(x|z)]`` (higher is better) and
``div`` the divergence term before weighting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Value
from .gmm import DiagGMM, QuadratureSpec, _logsumexp, cs_divergence, gmm_log_pdf
from .nn import Dense, Mlp, ParamStore

LOG_2PI = ad.LOG_2PI
LOGVAR_MIN = float(np.log(1e-8))
LOGVAR_MAX = float(np.log(1e8))


@dataclass
class EncoderOutput:
    mu: Value
    logvar: Value  # clamped
    var: Value

    @property
    def batch_size(self) -> int:
        return self.mu.shape[0]


class MlpEncoder:
    """Shared trunk with separate mean and log-variance heads.

    With ``logvar_init="zero"`` (default) the log-variance head starts with
    zero weights, so every posterior begins at unit variance; ``"glorot"``
    initialises it like the other layers.
    """

    def __init__(self, store: ParamStore, in_dim: int, latent_dim: int, hidden: Sequence, rng,
                 name: str = "encoder", logvar_init: str = "zero"):
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if logvar_init not in ("zero", "glorot"):
            raise ValueError(f"unknown logvar_init {logvar_init!r}")
        self.in_dim, self.latent_dim = in_dim, latent_dim
        self.trunk = Mlp(store, f"{name}.trunk", in_dim, hidden, None, rng)
        self.mu_head = Dense(store, f"{name}.mu", self.trunk.n_out, latent_dim, rng)
        self.logvar_head = Dense(store, f"{name}.logvar", self.trunk.n_out, latent_dim, rng)
        if logvar_init == "zero":
            self.logvar_head.W.data = np.zeros_like(self.logvar_head.W.data)

    def __call__(self, x) -> EncoderOutput:
        h = self.trunk(x)
        mu = self.mu_head(h)
        logvar = ad.clip(self.logvar_head(h), LOGVAR_MIN, LOGVAR_MAX)
        return EncoderOutput(mu, logvar, ad.exp(logvar))


def encode(enc: MlpEncoder, x) -> EncoderOutput:
    """Run the encoder and refuse non-finite posterior parameters."""
    out = enc(x)
    bad = ~(np.isfinite(out.mu.data).all(axis=1) & np.isfinite(out.logvar.data).all(axis=1))
    if bad.any():
        raise FloatingPointError(f"non-finite encoder output at batch index {int(np.argmax(bad))}")
    return out


def bernoulli_ll(x, logits) -> Value:
    """Per-example ``sum_d x log s(l) + (1-x) log(1-s(l))`` in logit form."""
    x_arr = x.data if isinstance(x, Value) else np.asarray(x, dtype=np.float64)
    if np.any(x_arr < 0) or np.any(x_arr > 1):
        raise ValueError("Bernoulli targets must lie in [0, 1]")
    logits = ad.as_value(logits)
    return ad.sum(x * logits - ad.softplus(logits), axis=-1)


def gaussian_ll(x, mean, logvar) -> Value:
    return ad.diag_gaussian_log_density(x, mean, logvar)


class MlpDecoder:
    """Maps latents to Bernoulli logits or Gaussian mean / log-variance."""

    def __init__(self, store: ParamStore, latent_dim: int, out_dim: int, hidden: Sequence, rng,
                 likelihood: str = "bernoulli", name: str = "decoder"):
        if likelihood not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown likelihood {likelihood!r}")
        self.latent_dim, self.out_dim, self.likelihood = latent_dim, out_dim, likelihood
        self.trunk = Mlp(store, f"{name}.trunk", latent_dim, hidden, None, rng)
        self.mean_head = Dense(store, f"{name}.mean", self.trunk.n_out, out_dim, rng)
        self.logvar_head = None
        if likelihood == "gaussian":
            self.logvar_head = Dense(store, f"{name}.logvar", self.trunk.n_out, out_dim, rng)

    def outputs(self, z):
        h = self.trunk(z)
        head = self.mean_head(h)
        if self.logvar_head is None:
            return head, None
        return head, ad.clip(self.logvar_head(h), LOGVAR_MIN, LOGVAR_MAX)

    def log_likelihood(self, x, z) -> Value:
        head, logvar = self.outputs(z)
        if logvar is None:
            return bernoulli_ll(x, head)
        return gaussian_ll(x, head, logvar)

    def mean(self, z) -> np.ndarray:
        head, logvar = self.outputs(z)
        return ad.sigmoid(head).data if logvar is None else head.data


# -- priors ---------------------------------------------------------------------

class PriorMixture(NamedTuple):
    log_weights: np.ndarray  # (K,)
    mu: Value  # (K, D)
    var: Value  # (K, D)

    def to_gmm(self) -> DiagGMM:
        w = np.exp(self.log_weights)
        return DiagGMM.from_arrays(w / w.sum(), self.mu.data, self.var.data)


class StandardNormal:
    kind = "standard_normal"

    def __init__(self, latent_dim: int):
        self.latent_dim = latent_dim
        self.n_components = 1

    def mixture(self) -> PriorMixture:
        d = self.latent_dim
        return PriorMixture(np.zeros(1), ad.constant(np.zeros((1, d))), ad.constant(np.ones((1, d))))


class MoGPrior:
    """Uniformly weighted mixture with (optionally) trainable means and log-variances."""

    kind = "mog"

    def __init__(self, store: ParamStore | None, n_components: int, latent_dim: int, rng=None,
                 trainable: bool = True, means=None, variances=None, name: str = "prior"):
        if n_components < 1:
            raise ValueError("a mixture prior needs K >= 1")
        self.n_components, self.latent_dim, self.trainable = n_components, latent_dim, trainable
        rng = np.random.default_rng(rng)
        means = rng.standard_normal((n_components, latent_dim)) if means is None else np.asarray(means, float)
        variances = np.ones((n_components, latent_dim)) if variances is None else np.asarray(variances, float)
        if means.shape != (n_components, latent_dim) or variances.shape != means.shape:
            raise ValueError("prior means/variances must have shape (K, D)")
        if trainable:
            if store is None:
                raise ValueError("a trainable prior needs a ParamStore")
            self.means = store.add(f"{name}.means", means)
            self.logvars = store.add(f"{name}.logvars", np.log(variances))
        else:
            self.means = ad.constant(means)
            self.logvars = ad.constant(np.log(variances))
        self._log_w = np.full(n_components, -np.log(n_components))

    def mixture(self) -> PriorMixture:
        var = ad.exp(ad.clip(self.logvars, LOGVAR_MIN, LOGVAR_MAX))
        return PriorMixture(self._log_w, self.means, var)


class VampPriorData:
    """Mixture of the encoder's posteriors at fixed pseudo-inputs taken from data."""

    kind = "vamp"

    def __init__(self, encoder: MlpEncoder, pseudo_inputs):
        u = np.array(pseudo_inputs, dtype=np.float64, copy=True)
        if u.ndim != 2 or u.shape[0] < 1:
            raise ValueError("pseudo-inputs must be a non-empty (K, x_dim) matrix")
        u.setflags(write=False)
        self.encoder = encoder
        self.pseudo_inputs = u
        self.n_components = u.shape[0]
        self.latent_dim = encoder.latent_dim
        self._log_w = np.full(self.n_components, -np.log(self.n_components))

    def mixture(self) -> PriorMixture:
        out = encode(self.encoder, self.pseudo_inputs)
        return PriorMixture(self._log_w, out.mu, out.var)


def prior_log_prob(prior, z) -> Value:
    """Row-wise log density of ``z`` (shape ``(N, D)``) under the prior."""
    mix = prior.mixture()
    z = ad.as_value(z)
    comp = ad.pairwise_log_overlap(z, np.zeros(z.shape), mix.mu, mix.var)
    return ad.logsumexp(comp + mix.log_weights[None, :], axis=1)


# -- divergences on the tape ---------------------------------------------------

def _log_cross(lw_a, mu_a, var_a, lw_b, mu_b, var_b) -> Value:
    z = ad.pairwise_log_overlap(mu_a, var_a, mu_b, var_b)
    lw_a = ad.reshape(ad.as_value(lw_a), (-1, 1))
    lw_b = ad.reshape(ad.as_value(lw_b), (1, -1))
    return ad.logsumexp(z + lw_a + lw_b)


def cs_divergence_mixtures(lw_q, mu_q, var_q, lw_p, mu_p, var_p) -> Value:
    """Differentiable closed-form CS divergence between two diagonal mixtures."""
    return (-_log_cross(lw_q, mu_q, var_q, lw_p, mu_p, var_p)
            + 0.5 * _log_cross(lw_q, mu_q, var_q, lw_q, mu_q, var_q)
            + 0.5 * _log_cross(lw_p, mu_p, var_p, lw_p, mu_p, var_p))


def batched_cs_divergence(q: EncoderOutput, mix: PriorMixture) -> Value:
    """CS divergence between each single-Gaussian posterior row and the prior mixture.

    This is the general closed form with a one-component ``q``; returns ``(B,)``.
    """
    cross = ad.pairwise_log_overlap(q.mu, q.var, mix.mu, mix.var) + mix.log_weights[None, :]
    log_qp = ad.logsumexp(cross, axis=1)
    # log ∫q² = log N(mu | mu, 2 var)
    log_qq = -0.5 * ad.sum(LOG_2PI + np.log(2.0) + q.logvar, axis=1)
    pp = (ad.pairwise_log_overlap(mix.mu, mix.var, mix.mu, mix.var)
          + mix.log_weights[:, None] + mix.log_weights[None, :])
    log_pp = ad.logsumexp(pp)
    return -log_qp + 0.5 * log_qq + 0.5 * log_pp


def mixture_csrae_terms(q: EncoderOutput, prior) -> dict:
    """The expanded per-example terms of the mixture-prior CS divergence.

    ``attraction``: log sum_k N(mu | mu_k, var + var_k);
    ``repulsion``: log sum_{k,k'} N(mu_k | mu_k', var_k + var_k');
    ``spread``: sum_d log(2 sigma_d sqrt(pi)).
    With uniform weights the ``log K`` contributions cancel and
    ``cs = -attraction + 0.5 * repulsion - 0.5 * spread``.
    """
    mix = prior.mixture()
    mu, var = mix.mu.data, mix.var.data
    attraction = _logsumexp(_kernels.pairwise_log_overlap(q.mu.data, q.var.data, mu, var), axis=1)
    repulsion = float(_logsumexp(_kernels.pairwise_log_overlap(mu, var, mu, var)))
    spread = np.sum(np.log(2.0 * np.sqrt(q.var.data) * np.sqrt(np.pi)), axis=1)
    log_k = float(np.log(mix.mu.shape[0]))
    cs = -attraction + 0.5 * repulsion - 0.5 * spread
    return {"attraction": attraction, "repulsion": repulsion, "spread": spread, "log_k": log_k, "cs": cs}


def kl_to_single_gaussian(q: EncoderOutput, mix: PriorMixture) -> Value:
    if mix.mu.shape[0] != 1:
        raise ValueError("KL is only closed-form for a single-Gaussian prior")
    log_v0 = ad.log(mix.var)
    t = (q.var + ad.square(q.mu - mix.mu)) / mix.var
    return 0.5 * ad.sum(log_v0 - q.logvar + t - 1.0, axis=1)


# -- objectives ------------------------------------------------------------------

class LossTerms(NamedTuple):
    loss: Value
    recon: Value
    div: Value


def reparameterize(mu, var, noise) -> Value:
    return ad.as_value(mu) + ad.sqrt(ad.as_value(var)) * noise


def _posterior_log_density(q: EncoderOutput, noise) -> Value:
    # log q(z|x) at z = mu + sigma * eps
    return -0.5 * ad.sum(LOG_2PI + q.logvar + np.square(noise), axis=-1)


def elbo_loss(enc, dec, prior, x, beta: float, noise, kl_estimate: str = "analytic") -> LossTerms:
    """Negative (beta-weighted) ELBO. ``beta = 1`` is the plain VAE bound.

    ``kl_estimate="sample"`` replaces the closed-form KL with the
    single-sample ``log q(z|x) - log p(z)``.
    """
    q = encode(enc, x)
    z = reparameterize(q.mu, q.var, noise)
    ll = dec.log_likelihood(x, z)
    if kl_estimate == "analytic":
        kl = kl_to_single_gaussian(q, prior.mixture())
    elif kl_estimate == "sample":
        kl = _posterior_log_density(q, noise) - prior_log_prob(prior, z)
    else:
        raise ValueError(f"unknown kl_estimate {kl_estimate!r}")
    loss = ad.mean(beta * kl - ll)
    return LossTerms(loss, ad.mean(ll), ad.mean(kl))


def iwae_log_weights(enc, dec, prior, x, noise) -> Value:
    """``log p(x|z_s) + log p(z_s) - log q(z_s|x)`` with shape ``(S, B)``."""
    noise = np.asarray(noise, dtype=np.float64)
    q = encode(enc, x)
    s, b, d = noise.shape
    if (b, d) != q.mu.shape:
        raise ValueError(f"noise shape {noise.shape} does not match posterior {q.mu.shape}")
    mu = ad.reshape(q.mu, (1, b, d))
    sd = ad.reshape(ad.sqrt(q.var), (1, b, d))
    z = ad.reshape(mu + sd * noise, (s * b, d))
    x_arr = np.asarray(x, dtype=np.float64)
    xs = np.broadcast_to(x_arr, (s,) + x_arr.shape).reshape(s * b, -1)
    ll = ad.reshape(dec.log_likelihood(xs, z), (s, b))
    lp = ad.reshape(prior_log_prob(prior, z), (s, b))
    lq = -0.5 * ad.sum(LOG_2PI + ad.reshape(q.logvar, (1, b, d)) + np.square(noise), axis=-1)
    return ll + lp - lq


def iwae_bound(enc, dec, prior, x, n_iw: int, noise) -> Value:
    """Batch mean of the importance-weighted bound with ``n_iw`` samples."""
    if n_iw < 1:
        raise ValueError("n_iw must be >= 1")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[0] != n_iw:
        raise ValueError(f"expected {n_iw} noise draws, got {noise.shape[0]}")
    logw = iwae_log_weights(enc, dec, prior, x, noise)
    return ad.mean(ad.logsumexp(logw, axis=0) - np.log(n_iw))


def csrae_loss(enc, dec, prior, x, lam: float, noise) -> LossTerms:
    """Reconstruction loss plus ``lam`` times the closed-form CS divergence to the prior."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    q = encode(enc, x)
    z = reparameterize(q.mu, q.var, noise)
    ll = dec.log_likelihood(x, z)
    cs = batched_cs_divergence(q, prior.mixture())
    loss = ad.mean(lam * cs - ll)
    return LossTerms(loss, ad.mean(ll), ad.mean(cs))


def mixture_csrae_loss(enc, dec, prior, x, lam: float, noise) -> LossTerms:
    if not isinstance(prior, (MoGPrior, VampPriorData)):
        raise TypeError("mixture_csrae_loss needs a MoGPrior or VampPriorData prior")
    return csrae_loss(enc, dec, prior, x, lam, noise)


def warmup_coefficient(epoch: float, warmup: float, target: float) -> float:
    if warmup < 0:
        raise ValueError("warm-up length must be >= 0")
    if warmup == 0:
        return float(target)
    return float(target) * min(1.0, epoch / warmup)


def model_selection_score(recon_ll: float, cs: float) -> float:
    """Negative reconstruction log-likelihood plus unweighted CS divergence (lower is better)."""
    return -float(recon_ll) + float(cs)


# -- quadrature check of the objective decomposition ---------------------------

@dataclass
class Decomposition:
    log_px: float
    recon: float
    kl_posterior: float
    kl_prior: float
    cs: float
    objective: float
    elbo: float
    residual: float


def _log_integral(spec: QuadratureSpec, log_f: np.ndarray) -> float:
    m = float(np.max(log_f))
    return m + float(np.log(spec.integrate(np.exp(log_f - m))))


def decomposition_check_1d(enc, dec, prior, x, lam: float, grid: QuadratureSpec,
                           hermite_nodes: int = 80) -> Decomposition:
    """Evaluate both sides of the CSRAE objective decomposition independently.

    The objective ``recon - lam*cs`` takes its reconstruction term from
    Gauss-Hermite quadrature under q and its divergence from the mixture
    closed form.  The decomposition
    ``log p(x) - KL(q || p(z|x)) + KL(q || p(z)) - lam*cs`` is built from
    grid quadrature only.  Single observation, one-dimensional latent.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] != 1:
        raise ValueError("decomposition check takes a single observation")
    q = encode(enc, x)
    if q.mu.shape[1] != 1:
        raise ValueError("decomposition check needs a 1-D latent space")
    q_gmm = DiagGMM.from_arrays(None, q.mu.data, q.var.data)
    p_gmm = prior.mixture().to_gmm()
    if not (grid.covers(q_gmm) and grid.covers(p_gmm)):
        raise ValueError("quadrature grid does not cover 8 standard deviations of q and the prior")
    # objective side
    nodes, weights = np.polynomial.hermite_e.hermegauss(hermite_nodes)
    zh = (q.mu.data[0, 0] + np.sqrt(q.var.data[0, 0]) * nodes)[:, None]
    recon = float(np.dot(weights, dec.log_likelihood(np.repeat(x, len(nodes), axis=0), zh).data)
                  / np.sqrt(2.0 * np.pi))
    objective = recon - lam * cs_divergence(q_gmm, p_gmm)
    # decomposition side
    zg = grid.grid()[:, None]
    ll = dec.log_likelihood(np.repeat(x, zg.shape[0], axis=0), zg).data
    lp = gmm_log_pdf(p_gmm, zg)
    lq = gmm_log_pdf(q_gmm, zg)
    dq = np.exp(lq)
    log_px = _log_integral(grid, ll + lp)
    log_post = ll + lp - log_px
    kl_post = grid.integrate(dq * (lq - log_post))
    kl_prior = grid.integrate(dq * (lq - lp))
    cs = (-_log_integral(grid, lq + lp) + 0.5 * _log_integral(grid, 2.0 * lq)
          + 0.5 * _log_integral(grid, 2.0 * lp))
    rhs = log_px - kl_post + kl_prior - lam * cs
    return Decomposition(log_px, recon, kl_post, kl_prior, cs, objective, recon - kl_prior,
                         abs(objective - rhs))
