"""Experiment configuration loaded from a single JSON document."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

OBJECTIVES = ("elbo", "beta_vae", "iwae", "csrae", "mixture_csrae", "ssl")
PRIOR_TYPES = ("standard_normal", "mog", "vamp")
DATASET_KINDS = ("pinwheel", "two_gaussian", "idx", "csv")

PINWHEEL_HIDDEN_ENC = [[5, "softplus"], [10, "softplus"]]
PINWHEEL_HIDDEN_DEC = [[10, "softplus"], [5, None]]
LAMBDA_SWEEP = [0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 5.0, 10.0]


class ConfigError(ValueError):
    pass


def _build(cls, doc: dict | None, where: str):
    doc = dict(doc or {})
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**doc)


@dataclass
class DatasetSpec:
    kind: str = "pinwheel"
    n: int = 4000
    clusters: int = 4
    radial_std: float = 0.05
    tangential_std: float = 0.25
    rate: float = 0.25
    images: str | None = None
    labels: str | None = None
    path: str | None = None
    label_columns: list = field(default_factory=list)
    header: bool = False
    split: list | None = None  # (train, val, test) counts
    binarization: str = "none"
    labelled_fraction: float = 1.0

    def validate(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
        if self.kind == "idx":
            for p in (self.images, self.labels):
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"dataset file {p} does not exist")
            if self.images is None:
                raise ConfigError("dataset.images is required for idx data")
        if self.kind == "csv" and (self.path is None or not Path(self.path).exists()):
            raise ConfigError(f"dataset file {self.path} does not exist")
        if not 0.0 < self.labelled_fraction <= 1.0:
            raise ConfigError("dataset.labelled_fraction must be in (0, 1]")
        if self.split is not None and len(self.split) != 3:
            raise ConfigError("dataset.split must list train, val and test counts")


@dataclass
class ModelSpec:
    latent_dim: int = 2
    encoder: list = field(default_factory=lambda: [list(h) for h in PINWHEEL_HIDDEN_ENC])
    decoder: list = field(default_factory=lambda: [list(h) for h in PINWHEEL_HIDDEN_DEC])
    classifier: list = field(default_factory=lambda: [[10, "softplus"]])
    likelihood: str = "gaussian"

    def validate(self):
        if self.latent_dim < 1:
            raise ConfigError("model.latent_dim must be >= 1")
        if self.likelihood not in ("gaussian", "bernoulli"):
            raise ConfigError("model.likelihood must be gaussian or bernoulli")


@dataclass
class PriorSpec:
    type: str = "standard_normal"
    K: int = 1
    trainable: bool = True
    means: list | None = None
    vars: list | None = None

    def validate(self):
        if self.type not in PRIOR_TYPES:
            raise ConfigError(f"prior.type must be one of {PRIOR_TYPES}")
        if self.K < 1:
            raise ConfigError("prior.K must be >= 1")
        if self.type == "mog" and not self.trainable and self.means is None:
            raise ConfigError("a fixed mixture prior needs explicit means")


@dataclass
class OptimSpec:
    lr: float = 5e-4
    batch_size: int = 100
    epochs: int = 400
    warmup: int = 100
    patience: int = 100

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.warmup < 0 or self.patience < 1:
            raise ConfigError("optimizer settings out of range")


@dataclass
class EvalSpec:
    S: int = 1000
    k: list = field(default_factory=lambda: [3, 5, 10])
    sample_embedding: bool = False

    def validate(self):
        if self.S < 1 or not self.k or min(self.k) < 1:
            raise ConfigError("eval.S and every eval.k must be >= 1")


@dataclass
class ToySpec:
    steps: int = 20000
    lr: float = 1e-3
    n: int = 2000
    mc_samples: int = 1000
    kl_init: list = field(default_factory=lambda: [0.5, 1.0])  # (mean, std)
    cs_init: list = field(default_factory=lambda: [[-1.0, 1.0], [1.0, 1.0]])  # per component (mean, std)
    log_every: int = 10


@dataclass
class ExperimentConfig:
    seed: int = 0
    objective: str = "csrae"
    lam: float = 1.0
    beta: float = 1.0
    alpha: float = 1.0
    tau: float = 0.5
    n_iw: int = 5
    ssl_mode: str = "q_weighted"
    ssl_phase: str = "joint"  # "unsupervised" treats every training row as unlabelled
    out: str = "runs/default"
    init_checkpoint: str | None = None
    lambda_list: list = field(default_factory=lambda: list(LAMBDA_SWEEP))
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    prior: PriorSpec = field(default_factory=PriorSpec)
    optimizer: OptimSpec = field(default_factory=OptimSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    toy: ToySpec = field(default_factory=ToySpec)

    _SECTIONS = {"dataset": DatasetSpec, "model": ModelSpec, "prior": PriorSpec,
                 "optimizer": OptimSpec, "eval": EvalSpec, "toy": ToySpec}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        doc = dict(doc)
        for key, sub in cls._SECTIONS.items():
            if key in doc:
                doc[key] = _build(sub, doc[key], key)
        cfg = _build(cls, doc, "config")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        for name in ("lam", "beta", "alpha"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0")
        if self.n_iw < 1:
            raise ConfigError("n_iw must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        single = self.prior.type == "standard_normal" or (self.prior.type == "mog" and self.prior.K == 1)
        if self.objective in ("elbo", "beta_vae") and not single:
            raise ConfigError(f"{self.objective} needs a single-Gaussian prior for its closed-form KL")
        if self.ssl_phase not in ("joint", "unsupervised"):
            raise ConfigError("ssl_phase must be joint or unsupervised")
        if self.objective == "mixture_csrae" and self.prior.type == "standard_normal":
            raise ConfigError("mixture_csrae needs a mog or vamp prior")
        for sub in (self.dataset, self.model, self.prior, self.optimizer, self.eval):
            sub.validate()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        doc = self.to_dict()
        doc.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.from_dict(doc)
