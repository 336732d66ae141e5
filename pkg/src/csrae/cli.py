"""Command-line entry point: ``csrae <command> [options]``.

Every command prints a JSON summary on stdout. Failures exit with status 1
and a JSON object ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import train as T
from .config import ExperimentConfig
from .evaluation import FeatureStats, classification_error, frechet_distance, knn_classify


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, out=args.out)


def _checkpoint(args, cfg) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / T.CHECKPOINT_NAME
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return path


def _read_matrix(path) -> np.ndarray:
    arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"{path}: no rows")
    return arr


def cmd_train(args) -> dict:
    cfg = _config(args)
    res = T.train(cfg)
    return {"out": str(res.out), "best_epoch": res.best_epoch, "best_score": res.best_score,
            "stopped_epoch": res.stopped_epoch}


def cmd_fit_toy(args) -> dict:
    res = T.fit_toy(_config(args))
    return {"kl": res["kl"], "cs": res["cs"]}


def cmd_sweep(args) -> dict:
    cfg = _config(args)
    lambdas = [float(v) for v in args.lambda_list.split(",")] if args.lambda_list else cfg.lambda_list
    return {"rows": T.sweep_lambda(cfg, lambdas)}


def cmd_eval(args) -> dict:
    cfg = _config(args)
    metrics = T.evaluate(cfg, _checkpoint(args, cfg))
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "eval.json").write_text(json.dumps(metrics, sort_keys=True, indent=2))
    return metrics


def cmd_sample(args) -> dict:
    cfg = _config(args)
    x, comp = T.sample(cfg, _checkpoint(args, cfg), args.n, args.component)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    path = Path(args.samples) if args.samples else Path(cfg.out) / "samples.csv"
    header = ["component"] + [f"x{j}" for j in range(x.shape[1])]
    T.write_csv(path, header, [[int(c)] + list(row) for c, row in zip(comp, x)])
    return {"samples": str(path), "n": int(x.shape[0])}


def cmd_frechet(args) -> dict:
    a = FeatureStats.fit(_read_matrix(args.a))
    b = FeatureStats.fit(_read_matrix(args.b))
    return {"frechet_distance": frechet_distance(a, b)}


def cmd_knn(args) -> dict:
    train = _read_matrix(args.train)
    query = _read_matrix(args.query)
    x_tr, y_tr = train[:, :-1], train[:, -1].astype(np.int64)
    has_labels = query.shape[1] == train.shape[1]
    x_q = query[:, :-1] if has_labels else query
    out = {}
    for k in (int(v) for v in args.k.split(",")):
        pred = knn_classify(x_tr, y_tr, x_q, k)
        out[f"k{k}"] = {"predictions": pred.tolist()}
        if has_labels:
            out[f"k{k}"]["error"] = classification_error(pred, query[:, -1].astype(np.int64))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csrae", description="Cauchy-Schwarz regularized autoencoder experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="experiment configuration (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides the config)")
        if checkpoint:
            p.add_argument("--checkpoint", help="parameter checkpoint (default: <out>/checkpoint.bin)")

    common(sub.add_parser("train", help="train one model"))
    common(sub.add_parser("fit-toy", help="KL vs CS fit of a two-Gaussian target"))
    p = sub.add_parser("sweep-lambda", help="train one model per lambda")
    common(p)
    p.add_argument("--lambda-list", help="comma-separated lambda values")
    common(sub.add_parser("eval", help="test-set metrics of a checkpoint"), checkpoint=True)
    p = sub.add_parser("sample", help="decode draws from the prior")
    common(p, checkpoint=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--component", type=int)
    p.add_argument("--samples", help="CSV path (default: <out>/samples.csv)")
    p = sub.add_parser("frechet", help="Fréchet distance between two feature CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p = sub.add_parser("knn", help="kNN classification; last CSV column holds labels")
    p.add_argument("train")
    p.add_argument("query")
    p.add_argument("--k", default="3,5,10")
    return parser


COMMANDS = {"train": cmd_train, "fit-toy": cmd_fit_toy, "sweep-lambda": cmd_sweep, "eval": cmd_eval,
            "sample": cmd_sample, "frechet": cmd_frechet, "knn": cmd_knn}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # reported as machine-readable JSON
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return 1
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
