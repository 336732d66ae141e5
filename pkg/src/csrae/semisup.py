"""Semi-supervised objectives with the label as a second latent variable.

Labels are organised as ``L`` groups (outputs) of ``C`` classes each and
are fed to the decoder as concatenated one-hot vectors, so the first
decoder layer acts as the label embedding. A single-label problem with
``K_y`` classes is ``L = 1, C = K_y``; a multi-label binary problem is
``C = 2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .models import MlpDecoder, MlpEncoder, StandardNormal, batched_cs_divergence, encode, reparameterize
from .nn import Mlp, ParamStore

Q_WEIGHTED = "q_weighted"
LITERAL_SUM = "literal_sum"
MAX_ENUMERATED_CLASSES = 64


@dataclass
class SslConfig:
    lam: float = 1.0
    beta: float = 1.0
    alpha: float = 1.0
    tau: float = 0.5
    class_prior: Sequence[float] | None = None
    mode: str = Q_WEIGHTED

    def __post_init__(self):
        for name in ("lam", "beta", "alpha"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.mode not in (Q_WEIGHTED, LITERAL_SUM):
            raise ValueError(f"unknown unlabelled mode {self.mode!r}")

    def log_prior(self, n_classes: int) -> np.ndarray:
        if self.class_prior is None:
            return np.full(n_classes, -np.log(n_classes))
        pi = np.asarray(self.class_prior, dtype=np.float64)
        if pi.shape != (n_classes,) or np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError("class_prior must be a strictly positive distribution over the classes")
        return np.log(pi)


class SslModel:
    """Encoder q(z|x), classifier q(y|x), conditional decoder p(x|z,y) and a prior on z."""

    def __init__(self, store: ParamStore, in_dim: int, latent_dim: int, n_classes: int, rng,
                 enc_hidden=((300, "relu"),), dec_hidden=((300, "relu"),), cls_hidden=((300, "relu"),),
                 n_outputs: int = 1, likelihood: str = "gaussian", prior=None):
        if n_classes < 1 or n_outputs < 1:
            raise ValueError("need at least one output with at least one class")
        self.n_classes, self.n_outputs = n_classes, n_outputs
        self.label_dim = n_classes * n_outputs
        self.encoder = MlpEncoder(store, in_dim, latent_dim, enc_hidden, rng, name="encoder")
        self.head = Mlp(store, "classifier", in_dim, cls_hidden, self.label_dim, rng)
        self.decoder = MlpDecoder(store, latent_dim + self.label_dim, in_dim, dec_hidden, rng,
                                  likelihood=likelihood, name="decoder")
        self.prior = prior if prior is not None else StandardNormal(latent_dim)
        self.latent_dim = latent_dim

    def class_log_probs(self, x) -> Value:
        """Log class probabilities, shape ``(B, L, C)``."""
        logits = ad.reshape(self.head(x), (-1, self.n_outputs, self.n_classes))
        return ad.log_softmax(logits, axis=-1)

    def predict(self, x) -> np.ndarray:
        """Most probable class per output, shape ``(B, L)``."""
        return np.argmax(self.class_log_probs(x).data, axis=-1)


def one_hot(labels, n_classes: int) -> np.ndarray:
    """``(B,)`` or ``(B, L)`` integer labels to flattened ``(B, L*C)`` one-hot rows."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if np.any(labels < 0) or np.any(labels >= n_classes) or np.any(labels != np.round(labels)):
        raise ValueError(f"labels must be integers in [0, {n_classes})")
    b, l = labels.shape
    out = np.zeros((b, l, n_classes))
    out[np.arange(b)[:, None], np.arange(l)[None, :], labels.astype(np.int64)] = 1.0
    return out.reshape(b, l * n_classes)


def _check_one_hot(y, model: SslModel) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != model.label_dim:
        raise ValueError(f"labels must be one-hot rows of width {model.label_dim}")
    groups = y.reshape(y.shape[0], model.n_outputs, model.n_classes)
    if not (np.all((groups == 0) | (groups == 1)) and np.all(groups.sum(axis=-1) == 1)):
        bad = int(np.argmax(~np.all(groups.sum(axis=-1) == 1, axis=1) | ~np.all((groups == 0) | (groups == 1), axis=(1, 2))))
        raise ValueError(f"malformed one-hot label at row {bad}")
    return y


def categorical_kl(log_q: Value, log_pi: np.ndarray) -> Value:
    """``sum_k q_k (log q_k - log pi_k)`` over the last axis, summed over outputs; shape ``(B,)``."""
    kl = ad.sum(ad.exp(log_q) * (log_q - log_pi), axis=-1)
    return ad.sum(kl, axis=-1) if kl.data.ndim > 1 else kl


def _entropy(log_q: Value) -> Value:
    h = -ad.sum(ad.exp(log_q) * log_q, axis=-1)
    return ad.sum(h, axis=-1) if h.data.ndim > 1 else h


def _shared_terms(model: SslModel, x, cfg: SslConfig, noise):
    """Pieces of the labelled loss that do not depend on ``y``: ``(z, lam*cs + beta*kl_y, log q(y|x))``."""
    q = encode(model.encoder, x)
    z = reparameterize(q.mu, q.var, noise)
    cs = batched_cs_divergence(q, model.prior.mixture())
    log_q = model.class_log_probs(x)
    kl_y = categorical_kl(log_q, cfg.log_prior(model.n_classes))
    return z, cfg.lam * cs + cfg.beta * kl_y, log_q


def _recon(model: SslModel, x, z: Value, y) -> Value:
    return model.decoder.log_likelihood(x, ad.concat([z, ad.as_value(y)], axis=1))


def labelled_loss_per_example(model: SslModel, x, y, cfg: SslConfig, noise) -> Value:
    y = _check_one_hot(y, model)
    z, reg, _ = _shared_terms(model, x, cfg, noise)
    return reg - _recon(model, x, z, y)


def labelled_loss(model: SslModel, x, y, cfg: SslConfig, noise) -> Value:
    """Batch mean of ``-E_q log p(x|z,y) + lam*CS(q(z|x)||p(z)) + beta*KL(q(y|x)||p(y))``."""
    return ad.mean(labelled_loss_per_example(model, x, y, cfg, noise))


def unlabelled_loss_per_example(model: SslModel, x, cfg: SslConfig, noise) -> Value:
    if model.n_outputs != 1:
        raise ValueError("exact enumeration needs a single output; use multilabel_unlabelled_loss")
    k = model.n_classes
    if k > MAX_ENUMERATED_CLASSES:
        raise ValueError(f"{k} classes is too many to enumerate (max {MAX_ENUMERATED_CLASSES}); "
                         "use the Gumbel-Softmax path")
    b = np.asarray(x).shape[0]
    z, reg, log_q = _shared_terms(model, x, cfg, noise)
    eye = np.eye(k)
    nll = ad.concat([ad.reshape(-_recon(model, x, z, np.repeat(eye[c:c + 1], b, axis=0)), (b, 1))
                     for c in range(k)], axis=1)  # (B, K)
    log_q = ad.reshape(log_q, (b, k))
    if cfg.mode == LITERAL_SUM:
        return ad.sum(nll, axis=1) + k * reg
    # sum_y q(y|x) [L(x, y) + log q(y|x)]
    return ad.sum(ad.exp(log_q) * nll, axis=1) + reg - _entropy(log_q)


def unlabelled_loss(model: SslModel, x, cfg: SslConfig, noise) -> Value:
    return ad.mean(unlabelled_loss_per_example(model, x, cfg, noise))


def classification_nll(model: SslModel, x, y) -> Value:
    """Per-example ``-log q(y|x)`` summed over outputs."""
    y = _check_one_hot(y, model)
    log_q = ad.reshape(model.class_log_probs(x), (-1, model.label_dim))
    return -ad.sum(log_q * y, axis=1)


def combined_objective(model: SslModel, labelled, unlabelled, cfg: SslConfig) -> Value:
    """``E_l[L] + E_u[U] + alpha * E_l[-log q(y|x)]``.

    ``labelled`` is ``(x, y_onehot, noise)`` and ``unlabelled`` is
    ``(x, noise)``; either may be ``None`` or have zero rows. For a
    multi-output model the unlabelled term uses the Gumbel-Softmax path
    and ``unlabelled`` may carry a third element with frozen Gumbel noise.
    """
    def _rows(batch):
        return 0 if batch is None else np.asarray(batch[0]).shape[0]

    n_l, n_u = _rows(labelled), _rows(unlabelled)
    if n_l == 0 and n_u == 0:
        raise ValueError("both the labelled and the unlabelled batch are empty")
    total = None
    if n_l:
        x_l, y_l, noise_l = labelled
        total = labelled_loss(model, x_l, y_l, cfg, noise_l)
        if cfg.alpha:
            total = total + cfg.alpha * ad.mean(classification_nll(model, x_l, y_l))
    if n_u:
        if model.n_outputs == 1:
            u = unlabelled_loss(model, unlabelled[0], cfg, unlabelled[1])
        else:
            g = unlabelled[2] if len(unlabelled) > 2 else None
            u = multilabel_unlabelled_loss(model, unlabelled[0], cfg, unlabelled[1], gumbel_noise=g)
        total = u if total is None else total + u
    return total


def sample_gumbel(shape, rng_seed=None) -> np.ndarray:
    u = np.random.default_rng(rng_seed).uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits, tau: float, rng_seed=None, noise=None) -> Value:
    """Relaxed one-hot sample ``softmax((h + g) / tau)`` over the last axis.

    ``noise`` freezes the standard Gumbel draws ``g``; otherwise they are
    drawn from ``rng_seed``.
    """
    if not tau > 0:
        raise ValueError("tau must be > 0")
    h = ad.as_value(logits)
    g = sample_gumbel(h.shape, rng_seed) if noise is None else np.asarray(noise, dtype=np.float64)
    if g.shape != h.shape:
        raise ValueError(f"Gumbel noise shape {g.shape} does not match logits {h.shape}")
    return ad.softmax((h + g) * (1.0 / tau), axis=-1)


def multilabel_unlabelled_loss_per_example(model: SslModel, x, cfg: SslConfig, noise,
                                           gumbel_noise=None, rng_seed=None) -> Value:
    z, reg, log_q = _shared_terms(model, x, cfg, noise)
    b = z.shape[0]
    y_soft = gumbel_softmax_sample(log_q, cfg.tau, rng_seed, gumbel_noise)
    nll = -_recon(model, x, z, ad.reshape(y_soft, (b, model.label_dim)))
    return nll + reg - _entropy(log_q)


def multilabel_unlabelled_loss(model: SslModel, x, cfg: SslConfig, noise, gumbel_noise=None,
                               rng_seed=None) -> Value:
    """Single relaxed-sample estimate of the unlabelled loss for ``L`` outputs.

    ``E_q(y|x)[L(x, y)] - H(q(y|x))`` with the expectation replaced by one
    Gumbel-Softmax draw per output, so no ``C**L`` enumeration is needed.
    """
    return ad.mean(multilabel_unlabelled_loss_per_example(model, x, cfg, noise, gumbel_noise, rng_seed))


def balanced_batch_iter(labels, batch_size: int, rng_seed=None, outputs: Sequence[int] | None = None,
                        n_batches: int | None = None) -> Iterator[tuple[np.ndarray, int]]:
    """Yield ``(row indices, output)`` with half positives and half negatives for that output.

    The majority class is undersampled; the designated output advances
    round-robin over ``outputs`` (all columns by default). Each class pool
    is reshuffled whenever it is exhausted.
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if batch_size < 2 or batch_size % 2:
        raise ValueError("batch_size must be even and >= 2")
    outputs = list(range(labels.shape[1])) if outputs is None else list(outputs)
    rng = np.random.default_rng(rng_seed)
    pools = {}
    for o in outputs:
        pos = np.flatnonzero(labels[:, o] == 1)
        neg = np.flatnonzero(labels[:, o] == 0)
        if pos.size == 0 or neg.size == 0:
            raise ValueError(f"output {o} has no {'positive' if pos.size == 0 else 'negative'} examples")
        pools[o] = [[pos, rng.permutation(pos), 0], [neg, rng.permutation(neg), 0]]
    half = batch_size // 2

    def take(pool, n):
        out = []
        while n:
            base, perm, pos = pool
            step = min(n, perm.size - pos)
            out.append(perm[pos:pos + step])
            pos += step
            n -= step
            if pos == perm.size:
                perm, pos = rng.permutation(base), 0
            pool[1], pool[2] = perm, pos
        return np.concatenate(out)

    t = 0
    while n_batches is None or t < n_batches:
        o = outputs[t % len(outputs)]
        idx = np.concatenate([take(pools[o][0], half), take(pools[o][1], half)])
        yield idx, o
        t += 1
