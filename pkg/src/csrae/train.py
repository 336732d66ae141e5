"""Training loop, evaluation and the toy / sweep experiments behind the CLI."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as D
from . import evaluation as E
from . import gmm
from . import models as M
from . import semisup as S
from .config import ExperimentConfig
from .nn import AdamState, ParamStore, adam_step

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.jsonl"
VAL_CHUNK = 1000


class TrainingError(RuntimeError):
    pass


def _seed(cfg: ExperimentConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(cfg.seed), stream])


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


# -- assembly ---------------------------------------------------------------------

def build_datasets(cfg: ExperimentConfig) -> tuple[D.Dataset, D.Dataset, D.Dataset]:
    spec = cfg.dataset
    if spec.kind == "pinwheel":
        full = D.gen_pinwheel(spec.n, spec.clusters, spec.radial_std, spec.tangential_std, spec.rate,
                              rng_seed=cfg.seed)
    elif spec.kind == "two_gaussian":
        full = D.gen_two_gaussian_1d(spec.n, rng_seed=cfg.seed)
    elif spec.kind == "idx":
        full = D.load_idx(spec.images, spec.labels)
    else:
        full = D.load_csv_labeled(spec.path, spec.label_columns, header=spec.header)
    n = len(full)
    counts = spec.split
    if counts is None:
        if spec.kind == "idx" and n == sum(D.MNIST_SPLIT):
            counts = D.MNIST_SPLIT
        else:
            n_val = n_test = n // 10
            counts = (n - n_val - n_test, n_val, n_test)
    parts = D.split(full, counts, rng_seed=cfg.seed)
    return tuple(D.Dataset(p.features, p.labels, p.split, spec.binarization, p.norm_range, p.indices)
                 for p in parts)


@dataclass
class Bundle:
    store: ParamStore
    encoder: M.MlpEncoder
    decoder: M.MlpDecoder
    prior: object
    ssl: S.SslModel | None = None
    n_classes: int = 0


def _hidden(spec) -> list:
    return [(int(u), a) for u, a in spec]


def _n_classes(ds: D.Dataset) -> int:
    if ds.labels is None:
        raise ValueError("semi-supervised training needs labelled data")
    return int(ds.labels.max()) + 1


def build_prior(cfg: ExperimentConfig, store: ParamStore, encoder, train: D.Dataset, rng):
    p, d = cfg.prior, cfg.model.latent_dim
    if p.type == "standard_normal":
        return M.StandardNormal(d)
    if p.type == "mog":
        return M.MoGPrior(store if p.trainable else None, p.K, d, rng, trainable=p.trainable,
                          means=p.means, variances=p.vars)
    rows = rng.choice(len(train), size=p.K, replace=p.K > len(train))
    return M.VampPriorData(encoder, train.features[np.sort(rows)])


def build_model(cfg: ExperimentConfig, train: D.Dataset) -> Bundle:
    rng = _seed(cfg, 0)
    store = ParamStore()
    m = cfg.model
    if cfg.objective == "ssl":
        k = _n_classes(train)
        outputs = train.labels.shape[1]
        ssl = S.SslModel(store, train.dim, m.latent_dim, k, rng, _hidden(m.encoder), _hidden(m.decoder),
                         _hidden(m.classifier), n_outputs=outputs, likelihood=m.likelihood)
        ssl.prior = build_prior(cfg, store, ssl.encoder, train, rng)
        return Bundle(store, ssl.encoder, ssl.decoder, ssl.prior, ssl, k)
    enc = M.MlpEncoder(store, train.dim, m.latent_dim, _hidden(m.encoder), rng)
    dec = M.MlpDecoder(store, m.latent_dim, train.dim, _hidden(m.decoder), rng, likelihood=m.likelihood)
    return Bundle(store, enc, dec, build_prior(cfg, store, enc, train, rng))


def ssl_config(cfg: ExperimentConfig, lam: float | None = None) -> S.SslConfig:
    return S.SslConfig(lam=cfg.lam if lam is None else lam, beta=cfg.beta, alpha=cfg.alpha, tau=cfg.tau,
                       mode=cfg.ssl_mode)


# -- losses --------------------------------------------------------------------------

def _target(cfg: ExperimentConfig) -> float:
    if cfg.objective == "elbo":
        return 1.0
    if cfg.objective == "beta_vae":
        return cfg.beta
    return cfg.lam


def batch_loss(cfg: ExperimentConfig, b: Bundle, x, rng, coef: float, labelled=None) -> ad.Value:
    """Training loss on one minibatch with divergence weight ``coef``; noise drawn from ``rng``."""
    bsz, d = x.shape[0], cfg.model.latent_dim
    if cfg.objective in ("elbo", "beta_vae"):
        return M.elbo_loss(b.encoder, b.decoder, b.prior, x, coef, rng.standard_normal((bsz, d))).loss
    if cfg.objective == "iwae":
        return -M.iwae_bound(b.encoder, b.decoder, b.prior, x, cfg.n_iw, rng.standard_normal((cfg.n_iw, bsz, d)))
    if cfg.objective in ("csrae", "mixture_csrae"):
        return M.csrae_loss(b.encoder, b.decoder, b.prior, x, coef, rng.standard_normal((bsz, d))).loss
    scfg = ssl_config(cfg, lam=coef)
    unl = None
    if bsz:
        unl = (x, rng.standard_normal((bsz, d)))
        if b.ssl.n_outputs > 1:
            unl = unl + (S.sample_gumbel((bsz, b.ssl.n_outputs, b.ssl.n_classes), rng),)
    lab = None
    if labelled is not None and labelled[0].shape[0]:
        xl, yl = labelled
        lab = (xl, S.one_hot(yl, b.ssl.n_classes), rng.standard_normal((xl.shape[0], d)))
    return S.combined_objective(b.ssl, lab, unl, scfg)


def validation_metrics(cfg: ExperimentConfig, b: Bundle, ds: D.Dataset, noise: np.ndarray) -> dict:
    """Full-weight metrics on ``ds`` with fixed reparameterization noise (one row per example)."""
    n = len(ds)
    mix = b.prior.mixture()
    single = mix.mu.shape[0] == 1
    re = cs = kl = 0.0
    labels = None if ds.labels is None else ds.labels
    wrong = 0
    for i in range(0, n, VAL_CHUNK):
        x = _fixed_draw(cfg, ds.features[i:i + VAL_CHUNK], i // VAL_CHUNK)
        q = M.encode(b.encoder, x)
        z = M.reparameterize(q.mu, q.var, noise[i:i + VAL_CHUNK])
        if b.ssl is not None:
            y = S.one_hot(labels[i:i + VAL_CHUNK], b.ssl.n_classes)
            ll = S._recon(b.ssl, x, z, y).data
            wrong += int(np.sum(np.any(b.ssl.predict(x) != labels[i:i + VAL_CHUNK], axis=1)))
        else:
            ll = b.decoder.log_likelihood(x, z).data
        re += float(np.sum(ll))
        cs += float(np.sum(M.batched_cs_divergence(q, mix).data))
        if single:
            kl += float(np.sum(M.kl_to_single_gaussian(q, mix).data))
    re, cs = re / n, cs / n
    rec = {"recon_error": -re, "cs": cs, "kl": kl / n if single else None,
           "model_selection_score": M.model_selection_score(re, cs)}
    weight = _target(cfg)
    if cfg.objective in ("elbo", "beta_vae"):
        rec["total"] = -re + weight * rec["kl"]
    else:
        rec["total"] = -re + weight * cs
    if b.ssl is not None:
        rec["class_error"] = wrong / n
    return rec


def _fixed_draw(cfg: ExperimentConfig, x, chunk: int = 0):
    return _prepare(cfg, x, epoch=0, batch_index=chunk, static_only=True)


def _fixed_draw_all(cfg: ExperimentConfig, x):
    parts = [_fixed_draw(cfg, x[i:i + VAL_CHUNK], i // VAL_CHUNK) for i in range(0, len(x), VAL_CHUNK)]
    return np.concatenate(parts) if parts else x


def _prepare(cfg: ExperimentConfig, x, epoch: int, batch_index: int, static_only: bool = False):
    policy = cfg.dataset.binarization
    if policy == D.NONE:
        return x
    if static_only and policy == D.DYNAMIC:
        # evaluation uses a fixed draw so validation scores are comparable across epochs
        return D.binarize(x, D.DYNAMIC, epoch=0, rng_seed=cfg.seed + 1, batch_index=batch_index)
    return D.binarize(x, policy, epoch=epoch, rng_seed=cfg.seed, batch_index=batch_index)


# -- training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    out: Path
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = math.inf
    stopped_epoch: int = 0
    bundle: Bundle | None = None


def _labelled_mask(cfg: ExperimentConfig, n: int) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if cfg.objective != "ssl" or cfg.ssl_phase == "unsupervised":
        return mask
    k = max(1, int(round(cfg.dataset.labelled_fraction * n)))
    mask[_seed(cfg, 4).choice(n, size=k, replace=False)] = True
    return mask


def train(cfg: ExperimentConfig, datasets=None) -> TrainResult:
    """Train with warm-up, per-epoch validation, best-score checkpointing and early stopping.

    Writes ``metrics.jsonl`` (epoch 0 is the untrained model), the best
    ``checkpoint.bin``, ``config.json`` and ``summary.json`` to ``cfg.out``.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, val_ds, _ = datasets or build_datasets(cfg)
    b = build_model(cfg, train_ds)
    if cfg.init_checkpoint:
        b.store.load(cfg.init_checkpoint)
    (out / "config.json").write_text(cfg.dumps())
    opt = cfg.optimizer
    adam = AdamState(lr=opt.lr)
    rng = _seed(cfg, 1)
    val_noise = _seed(cfg, 2).standard_normal((len(val_ds), cfg.model.latent_dim))
    mask = _labelled_mask(cfg, len(train_ds))
    x_all = train_ds.features
    unl_rows = np.flatnonzero(~mask)
    lab_rows = np.flatnonzero(mask)
    lab_cursor, lab_perm = 0, rng.permutation(lab_rows) if lab_rows.size else lab_rows
    result = TrainResult(out, bundle=b)
    target = _target(cfg)
    since_best = 0
    with open(out / METRICS_NAME, "w") as log:
        for epoch in range(opt.epochs + 1):
            rec = {"epoch": epoch}
            if epoch:
                coef = M.warmup_coefficient(epoch, opt.warmup, target)
                if cfg.objective == "iwae":
                    coef = 1.0
                rows = rng.permutation(unl_rows)
                n_steps = -(-(rows.size or lab_rows.size) // opt.batch_size)
                losses = []
                for bi in range(n_steps):
                    idx = rows[bi * opt.batch_size:(bi + 1) * opt.batch_size]
                    x = _prepare(cfg, x_all[idx], epoch, bi)
                    labelled = None
                    if lab_rows.size:
                        take = []
                        while len(take) < opt.batch_size:
                            if lab_cursor == lab_perm.size:
                                lab_perm, lab_cursor = rng.permutation(lab_rows), 0
                            step = min(opt.batch_size - len(take), lab_perm.size - lab_cursor)
                            take.extend(lab_perm[lab_cursor:lab_cursor + step])
                            lab_cursor += step
                        take = np.asarray(take)
                        labelled = (_prepare(cfg, x_all[take], epoch, bi), train_ds.labels[take])
                    if x.shape[0] == 0 and labelled is None:
                        continue
                    b.store.zero_grad()
                    loss = batch_loss(cfg, b, x, rng, coef, labelled)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
                    ad.backward(loss)
                    adam_step(b.store, adam, strict=False)
                    losses.append(value)
                rec["coef"] = coef
                rec["train_loss"] = float(np.mean(losses)) if losses else None
            rec.update(validation_metrics(cfg, b, val_ds, val_noise))
            score = rec["model_selection_score"]
            if not math.isfinite(score):
                raise TrainingError(f"non-finite validation score at epoch {epoch}")
            rec = {k: (_json_float(v) if isinstance(v, float) else v) for k, v in rec.items()}
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            result.records.append(rec)
            if score < result.best_score:
                result.best_score, result.best_epoch = score, epoch
                b.store.save(out / CHECKPOINT_NAME)
                since_best = 0
            elif epoch:
                since_best += 1
            result.stopped_epoch = epoch
            if since_best >= opt.patience:
                break
    summary = {"best_epoch": result.best_epoch, "best_score": result.best_score,
               "stopped_epoch": result.stopped_epoch, "n_parameters": b.store.num_parameters()}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    b.store.load(out / CHECKPOINT_NAME)
    return result


def load_trained(cfg: ExperimentConfig, checkpoint, datasets=None):
    datasets = datasets or build_datasets(cfg)
    b = build_model(cfg, datasets[0])
    try:
        b.store.load(checkpoint)
    except KeyError as exc:
        raise ValueError(f"checkpoint {checkpoint} does not match the configured model: {exc}") from exc
    return b, datasets


# -- evaluation and sampling ---------------------------------------------------------

def nearest_component_distance(mu: np.ndarray, prior) -> float:
    """Mean Euclidean distance from each posterior mean to its nearest prior component mean."""
    centers = prior.mixture().mu.data
    d2 = np.sum((mu[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    return float(np.mean(np.sqrt(d2.min(axis=1))))


def evaluate(cfg: ExperimentConfig, checkpoint, datasets=None) -> dict:
    """Test-set metrics of a checkpoint: IS-LL, kNN errors, RE/CS and the selection score."""
    b, (train_ds, _, test_ds) = load_trained(cfg, checkpoint, datasets)
    noise = _seed(cfg, 3).standard_normal((len(test_ds), cfg.model.latent_dim))
    out = validation_metrics(cfg, b, test_ds, noise)
    x_test = _fixed_draw_all(cfg, test_ds.features)
    if b.ssl is None:
        out["is_ll"] = E.importance_sampled_ll(b.encoder, b.decoder, b.prior, x_test, cfg.eval.S,
                                               rng_seed=[int(cfg.seed), 5])
    emb_train = E.latent_embed(b.encoder, _fixed_draw_all(cfg, train_ds.features),
                               sample=cfg.eval.sample_embedding, rng_seed=[int(cfg.seed), 6])
    emb_test = E.latent_embed(b.encoder, x_test, sample=cfg.eval.sample_embedding, rng_seed=[int(cfg.seed), 7])
    out["latent_prior_distance"] = nearest_component_distance(emb_test, b.prior)
    if train_ds.labels is not None and test_ds.labels is not None:
        for k in cfg.eval.k:
            pred = E.knn_classify(emb_train, train_ds.labels[:, 0], emb_test, min(int(k), len(train_ds)))
            out[f"knn_error_k{k}"] = E.classification_error(pred, test_ds.labels[:, 0])
    return {k: (_json_float(v) if isinstance(v, float) else v) for k, v in out.items()}


def sample(cfg: ExperimentConfig, checkpoint, n: int, component: int | None = None, datasets=None):
    """Decoder means for ``n`` latent draws from the prior (optionally a single component)."""
    b, _ = load_trained(cfg, checkpoint, datasets)
    if b.ssl is not None:
        raise ValueError("sampling from a semi-supervised model needs labels; not supported")
    p = b.prior.mixture().to_gmm()
    z, comp = gmm.sample_gmm(p, n, rng_seed=[int(cfg.seed), 8], component=component)
    x = b.decoder.mean(z) if n else np.zeros((0, b.decoder.out_dim))
    return x, comp


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# -- toy fit (two-Gaussian target) ---------------------------------------------------

TARGET = gmm.DiagGMM.from_arrays([0.5, 0.5], [[-3.0], [3.0]], [[1.0], [1.0]])


def _target_log_pdf(z: ad.Value) -> ad.Value:
    comp = ad.pairwise_log_overlap(z, np.zeros(z.shape), TARGET.means, TARGET.variances)
    return ad.logsumexp(comp + np.log(TARGET.weights)[None, :], axis=1)


def fit_toy(cfg: ExperimentConfig) -> dict:
    """Plain gradient descent of (a) Monte-Carlo KL(q||p) with a single Gaussian and
    (b) closed-form CS(q||p) with a two-component mixture, against the known target.

    Writes ``fit_toy_kl.csv`` / ``fit_toy_cs.csv`` trajectories and returns the
    final parameters. ``data_ll`` is the mean log-likelihood of the generated
    samples under the current fit.
    """
    toy = cfg.toy
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = D.gen_two_gaussian_1d(toy.n, rng_seed=cfg.seed).features
    rng = _seed(cfg, 10)
    eval_eps = _seed(cfg, 11).standard_normal((10 * toy.mc_samples, 1))

    # (a) reverse KL, single Gaussian
    mu = ad.parameter(np.array([[float(toy.kl_init[0])]]))
    log_sd = ad.parameter(np.array([[math.log(float(toy.kl_init[1]))]]))

    def kl_estimate(eps):
        z = mu + ad.exp(log_sd) * eps
        log_q = -0.5 * ad.LOG_2PI - log_sd - 0.5 * np.square(eps)
        return ad.mean(log_q - ad.reshape(_target_log_pdf(z), (-1, 1)))

    kl_rows = []
    for step in range(toy.steps + 1):
        if step % toy.log_every == 0 or step == toy.steps:
            q = gmm.DiagGMM.from_arrays(None, mu.data, np.exp(2 * log_sd.data))
            kl_rows.append((step, float(mu.data[0, 0]), float(np.exp(log_sd.data[0, 0])),
                            float(kl_estimate(eval_eps).data), float(np.mean(gmm.gmm_log_pdf(q, samples)))))
        if step == toy.steps:
            break
        mu.grad = log_sd.grad = None
        loss = kl_estimate(rng.standard_normal((toy.mc_samples, 1)))
        ad.backward(loss)
        mu.data = mu.data - toy.lr * mu.grad
        log_sd.data = log_sd.data - toy.lr * log_sd.grad

    # (b) closed-form CS, two components with fixed uniform weights
    init = np.asarray(toy.cs_init, dtype=np.float64)
    means = ad.parameter(init[:, :1].copy())
    log_sds = ad.parameter(np.log(init[:, 1:2]))
    lw = np.log(np.full(init.shape[0], 1.0 / init.shape[0]))
    t_lw, t_mu, t_var = np.log(TARGET.weights), TARGET.means, TARGET.variances

    def cs_value():
        return M.cs_divergence_mixtures(lw, means, ad.exp(2.0 * log_sds), t_lw, t_mu, t_var)

    cs_rows = []
    for step in range(toy.steps + 1):
        if step % toy.log_every == 0 or step == toy.steps:
            q = gmm.DiagGMM.from_arrays(None, means.data, np.exp(2 * log_sds.data))
            row = [step]
            for k in range(init.shape[0]):
                row += [float(means.data[k, 0]), float(np.exp(log_sds.data[k, 0]))]
            cs_rows.append(row + [gmm.cs_divergence(q, TARGET), float(np.mean(gmm.gmm_log_pdf(q, samples)))])
        if step == toy.steps:
            break
        means.grad = log_sds.grad = None
        loss = cs_value()
        ad.backward(loss)
        means.data = means.data - toy.lr * means.grad
        log_sds.data = log_sds.data - toy.lr * log_sds.grad

    write_csv(out / "fit_toy_kl.csv", ["step", "mean", "std", "divergence", "data_ll"], kl_rows)
    cs_header = ["step"] + [f"{p}_{k}" for k in range(init.shape[0]) for p in ("mean", "std")] + \
        ["divergence", "data_ll"]
    write_csv(out / "fit_toy_cs.csv", cs_header, cs_rows)
    result = {
        "kl": {"mean": kl_rows[-1][1], "std": kl_rows[-1][2], "divergence": kl_rows[-1][3]},
        "cs": {"means": sorted(float(m) for m in means.data[:, 0]),
               "stds": [float(s) for s in np.exp(log_sds.data[:, 0])], "divergence": cs_rows[-1][-2]},
        "kl_trace": [r[3] for r in kl_rows],
        "cs_trace": [r[-2] for r in cs_rows],
    }
    (out / "fit_toy.json").write_text(json.dumps({k: result[k] for k in ("kl", "cs")}, sort_keys=True, indent=2))
    return result


# -- lambda sweep --------------------------------------------------------------------

def sweep_lambda(cfg: ExperimentConfig, lambdas) -> list[dict]:
    """Train one model per lambda and record test RE, CS, score and latent-to-prior distance.

    Writes ``sweep.csv``; each run lives in ``<out>/lam_<value>``.
    """
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) < 2:
        raise ValueError("a sweep needs at least two lambda values")
    if min(lambdas) < 0:
        raise ValueError("lambda must be >= 0")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = build_datasets(cfg)
    rows = []
    for lam in lambdas:
        run_cfg = cfg.with_overrides(lam=lam, out=str(out / f"lam_{lam:g}"))
        res = train(run_cfg, datasets)
        metrics = evaluate(run_cfg, res.out / CHECKPOINT_NAME, datasets)
        rows.append({"lam": lam, "recon_error": metrics["recon_error"], "cs": metrics["cs"],
                     "score": metrics["model_selection_score"],
                     "latent_prior_distance": metrics["latent_prior_distance"],
                     "best_epoch": res.best_epoch})
    keys = ["lam", "recon_error", "cs", "score", "latent_prior_distance", "best_epoch"]
    write_csv(out / "sweep.csv", keys, [[r[k] for k in keys] for r in rows])
    order = sorted(rows, key=lambda r: r["lam"])
    tradeoff = {
        "cs_decreasing": all(a["cs"] > b["cs"] for a, b in zip(order, order[1:])),
        "recon_error_increasing": all(a["recon_error"] < b["recon_error"] for a, b in zip(order, order[1:])),
        "best_lambda": min(rows, key=lambda r: r["score"])["lam"],
    }
    (out / "sweep.json").write_text(json.dumps({"rows": rows, "tradeoff": tradeoff}, sort_keys=True, indent=2))
    return rows
