import json
import subprocess
import sys

import numpy as np
import pytest

from csrae import autodiff as ad
from csrae import data as D
from csrae import train as T
from csrae.cli import main
from csrae.config import ConfigError, ExperimentConfig

FIXED_CORNERS = {"type": "mog", "K": 4, "trainable": False, "means": [[0, 0], [0, 1], [1, 0], [1, 1]],
                 "vars": [[0.0025, 0.0025]] * 4}


def write_config(path, **doc):
    path.write_text(json.dumps(doc))
    return str(path)


def run(argv, capsys):
    code = main(argv)
    cap = capsys.readouterr()
    return code, (json.loads(cap.out) if cap.out.strip() else None), (json.loads(cap.err) if cap.err.strip() else None)


# -- configuration -----------------------------------------------------------------

def test_config_defaults_and_overrides(tmp_path):
    cfg = ExperimentConfig().with_overrides(seed=3)
    assert cfg.seed == 3 and cfg.optimizer.lr == 5e-4 and cfg.optimizer.batch_size == 100
    assert cfg.optimizer.patience == 100 and cfg.optimizer.warmup == 100 and cfg.eval.k == [3, 5, 10]
    assert cfg.lambda_list == [0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 5.0, 10.0]
    again = ExperimentConfig.load(write_config(tmp_path / "c.json", **cfg.to_dict()))
    assert again == cfg


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"optimizer": {"lr": 0.0}},
    {"objective": "elbo", "prior": {"type": "mog", "K": 3}},
    {"objective": "mixture_csrae"},
    {"lam": -1.0},
    {"dataset": {"kind": "csv", "path": "/nonexistent.csv"}},
    {"prior": {"type": "mog", "K": 2, "trainable": False}},
    {"model": {"wat": 1}},
])
def test_config_rejects(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_invalid_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    code, out, err = run(["train", "--config", str(p)], capsys)
    assert code == 1 and out is None
    assert err["error"] == "ConfigError" and err["command"] == "train"


# -- training ------------------------------------------------------------------------

def tiny(tmp_path, name="run", **extra):
    doc = {"seed": 1, "objective": "mixture_csrae", "lam": 1.0, "out": str(tmp_path / name),
           "prior": FIXED_CORNERS, "dataset": {"n": 400},
           "optimizer": {"epochs": 3, "warmup": 2, "patience": 100, "lr": 2e-3}}
    doc.update(extra)
    return write_config(tmp_path / f"{name}.json", **doc)


def test_train_zero_epochs(tmp_path, capsys):
    cfg = tiny(tmp_path, optimizer={"epochs": 0})
    code, out, _ = run(["train", "--config", cfg], capsys)
    assert code == 0 and out["best_epoch"] == 0 and out["stopped_epoch"] == 0
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["epoch"] == 0
    assert (tmp_path / "run" / "checkpoint.bin").exists()


def test_train_log_fields_and_best_checkpoint(tmp_path, capsys):
    code, out, _ = run(["train", "--config", tiny(tmp_path)], capsys)
    assert code == 0
    recs = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [0, 1, 2, 3]
    for r in recs:
        assert {"recon_error", "cs", "total", "model_selection_score"} <= set(r)
    scores = [r["model_selection_score"] for r in recs]
    assert out["best_epoch"] == int(np.argmin(scores))
    # the stored checkpoint reproduces the best logged validation score
    cfg = ExperimentConfig.load(tmp_path / "run.json")
    b, (_, val, _) = T.load_trained(cfg, tmp_path / "run" / "checkpoint.bin")
    noise = T._seed(cfg, 2).standard_normal((len(val), 2))
    assert T.validation_metrics(cfg, b, val, noise)["model_selection_score"] == pytest.approx(min(scores), abs=1e-12)


def test_train_and_eval_are_byte_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        cfg = tiny(tmp_path, name=name)
        assert run(["train", "--config", cfg], capsys)[0] == 0
        assert run(["eval", "--config", cfg], capsys)[0] == 0
    for f in ("metrics.jsonl", "checkpoint.bin", "eval.json", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_seed_override_changes_run(tmp_path, capsys):
    cfg = tiny(tmp_path)
    run(["train", "--config", cfg, "--out", str(tmp_path / "s1")], capsys)
    run(["train", "--config", cfg, "--out", str(tmp_path / "s2"), "--seed", "2"], capsys)
    assert (tmp_path / "s1" / "metrics.jsonl").read_bytes() != (tmp_path / "s2" / "metrics.jsonl").read_bytes()


def test_non_finite_loss_reports_epoch_and_batch(tmp_path, monkeypatch, capsys):
    def broken(*args, **kw):
        return ad.constant(np.nan)

    monkeypatch.setattr(T, "batch_loss", broken)
    code, _, err = run(["train", "--config", tiny(tmp_path)], capsys)
    assert code == 1 and err["error"] == "TrainingError"
    assert "epoch 1" in err["message"] and "batch 0" in err["message"]


@pytest.mark.parametrize("objective,prior", [("elbo", {}), ("beta_vae", {}), ("iwae", {}), ("csrae", {}),
                                             ("mixture_csrae", {"type": "vamp", "K": 5})])
def test_every_objective_trains(tmp_path, objective, prior, capsys):
    cfg = tiny(tmp_path, objective=objective, prior=prior, beta=2.0)
    code, out, _ = run(["train", "--config", cfg], capsys)
    assert code == 0, out
    assert code == run(["eval", "--config", cfg], capsys)[0]
    ev = json.loads((tmp_path / "run" / "eval.json").read_text())
    assert np.isfinite(ev["is_ll"]) and "knn_error_k5" in ev


def test_idx_bernoulli_pipeline(tmp_path, capsys):
    rng = np.random.default_rng(0)
    D.write_idx(tmp_path / "x.idx", rng.integers(0, 256, (60, 4, 4), dtype=np.uint8),
                tmp_path / "y.idx", rng.integers(0, 3, 60))
    cfg = write_config(tmp_path / "c.json", objective="csrae", out=str(tmp_path / "run"),
                       dataset={"kind": "idx", "images": str(tmp_path / "x.idx"), "labels": str(tmp_path / "y.idx"),
                                "binarization": "dynamic", "split": [40, 10, 10]},
                       model={"latent_dim": 2, "encoder": [[8, "relu"]], "decoder": [[8, "relu"]],
                              "likelihood": "bernoulli"},
                       optimizer={"epochs": 2, "batch_size": 10}, eval={"S": 10, "k": [3]})
    assert run(["train", "--config", cfg], capsys)[0] == 0
    code, out, _ = run(["eval", "--config", cfg], capsys)
    assert code == 0 and 0.0 <= out["knn_error_k3"] <= 1.0


def test_ssl_two_phase(tmp_path, capsys):
    base = dict(seed=0, objective="ssl", dataset={"n": 400, "labelled_fraction": 0.1},
                optimizer={"epochs": 2, "warmup": 1})
    p1 = write_config(tmp_path / "p1.json", ssl_phase="unsupervised", out=str(tmp_path / "p1"), **base)
    assert run(["train", "--config", p1], capsys)[0] == 0
    p2 = write_config(tmp_path / "p2.json", init_checkpoint=str(tmp_path / "p1" / "checkpoint.bin"),
                      out=str(tmp_path / "p2"), **base)
    assert run(["train", "--config", p2], capsys)[0] == 0
    first = json.loads((tmp_path / "p2" / "metrics.jsonl").read_text().splitlines()[0])
    last_p1 = min(json.loads(l)["model_selection_score"] for l in (tmp_path / "p1" / "metrics.jsonl").read_text().splitlines())
    assert first["model_selection_score"] == pytest.approx(last_p1, abs=1e-9)
    code, out, _ = run(["eval", "--config", p2], capsys)
    assert code == 0 and "class_error" in out


def test_multilabel_csv_ssl(tmp_path, capsys):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(80, 3))
    y = (x[:, :2] > 0).astype(int)
    np.savetxt(tmp_path / "d.csv", np.hstack([x, y]), delimiter=",", fmt="%.6f")
    cfg = write_config(tmp_path / "c.json", objective="ssl", out=str(tmp_path / "run"),
                       dataset={"kind": "csv", "path": str(tmp_path / "d.csv"), "label_columns": [3, 4],
                                "labelled_fraction": 0.25},
                       optimizer={"epochs": 2, "batch_size": 20}, eval={"k": [3]})
    assert run(["train", "--config", cfg], capsys)[0] == 0


# -- sampling, sweep, toy ---------------------------------------------------------------

def test_sample_command(tmp_path, capsys):
    cfg = tiny(tmp_path)
    run(["train", "--config", cfg], capsys)
    code, out, _ = run(["sample", "--config", cfg, "--n", "0"], capsys)
    assert code == 0 and out["n"] == 0
    assert (tmp_path / "run" / "samples.csv").read_text() == "component,x0,x1\n"
    code, out, _ = run(["sample", "--config", cfg, "--n", "20", "--component", "2",
                        "--samples", str(tmp_path / "s.csv")], capsys)
    rows = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
    assert code == 0 and rows.shape == (20, 3) and np.all(rows[:, 0] == 2)
    code, _, err = run(["sample", "--config", cfg, "--component", "4"], capsys)
    assert code == 1 and err["error"] == "IndexError"


def test_eval_rejects_mismatched_checkpoint(tmp_path, capsys):
    cfg = tiny(tmp_path)
    run(["train", "--config", cfg], capsys)
    other = tiny(tmp_path, name="other", model={"latent_dim": 3},
                 prior={"type": "mog", "K": 2, "trainable": True})
    code, _, err = run(["eval", "--config", other, "--checkpoint", str(tmp_path / "run" / "checkpoint.bin")], capsys)
    assert code == 1 and err["error"] == "ValueError"
    code, _, err = run(["eval", "--config", other, "--checkpoint", str(tmp_path / "nope.bin")], capsys)
    assert code == 1 and err["error"] == "FileNotFoundError"


def test_sweep_command(tmp_path, capsys):
    cfg = tiny(tmp_path)
    code, _, err = run(["sweep-lambda", "--config", cfg, "--lambda-list", "1.0"], capsys)
    assert code == 1 and "two" in err["message"]
    code, out, _ = run(["sweep-lambda", "--config", cfg, "--lambda-list", "0.5,2"], capsys)
    assert code == 0 and [r["lam"] for r in out["rows"]] == [0.5, 2.0]
    lines = (tmp_path / "run" / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("lam,recon_error,cs,score")
    summary = json.loads((tmp_path / "run" / "sweep.json").read_text())
    assert set(summary["tradeoff"]) == {"cs_decreasing", "recon_error_increasing", "best_lambda"}


def test_fit_toy_command(tmp_path, capsys):
    cfg = write_config(tmp_path / "t.json", out=str(tmp_path / "toy"), toy={"steps": 200, "mc_samples": 100})
    code, out, _ = run(["fit-toy", "--config", cfg], capsys)
    assert code == 0 and set(out) == {"kl", "cs"}
    kl = np.loadtxt(tmp_path / "toy" / "fit_toy_kl.csv", delimiter=",", skiprows=1)
    cs = np.loadtxt(tmp_path / "toy" / "fit_toy_cs.csv", delimiter=",", skiprows=1)
    assert kl.shape == (21, 5) and cs.shape == (21, 7)
    assert cs[-1, -2] < cs[0, -2]


def test_reverse_kl_locks_onto_a_mode_from_nearby_start(tmp_path):
    cfg = ExperimentConfig.from_dict({"out": str(tmp_path), "toy": {"kl_init": [2.0, 1.0], "steps": 5000}})
    kl = T.fit_toy(cfg)["kl"]
    assert 2.5 <= kl["mean"] <= 3.5 and kl["std"] == pytest.approx(1.0, abs=0.1)
    assert kl["divergence"] == pytest.approx(np.log(2.0), abs=0.02)


# -- standalone metric commands ------------------------------------------------------

def test_frechet_command(tmp_path, capsys):
    np.savetxt(tmp_path / "a.csv", [[-1.0], [1.0]], delimiter=",")
    np.savetxt(tmp_path / "b.csv", [[2.0], [4.0]], delimiter=",")
    code, out, _ = run(["frechet", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")], capsys)
    assert code == 0 and out["frechet_distance"] == pytest.approx(9.0, abs=1e-12)
    np.savetxt(tmp_path / "c.csv", [[1.0, 2.0], [3.0, 1.0]], delimiter=",")
    code, _, err = run(["frechet", str(tmp_path / "a.csv"), str(tmp_path / "c.csv")], capsys)
    assert code == 1 and err["command"] == "frechet"


def test_knn_command(tmp_path, capsys):
    np.savetxt(tmp_path / "tr.csv", [[0.0, 0.0, 0], [0.1, 0.0, 0], [5.0, 5.0, 1], [5.1, 5.0, 1]], delimiter=",")
    np.savetxt(tmp_path / "q.csv", [[0.2, 0.1, 0], [4.9, 5.2, 0]], delimiter=",")
    code, out, _ = run(["knn", str(tmp_path / "tr.csv"), str(tmp_path / "q.csv"), "--k", "1,3"], capsys)
    assert code == 0
    assert out["k1"]["predictions"] == [0, 1] and out["k1"]["error"] == 0.5
    np.savetxt(tmp_path / "u.csv", [[0.2, 0.1]], delimiter=",")
    code, out, _ = run(["knn", str(tmp_path / "tr.csv"), str(tmp_path / "u.csv"), "--k", "1"], capsys)
    assert out == {"k1": {"predictions": [0]}}
    code, _, err = run(["knn", str(tmp_path / "tr.csv"), str(tmp_path / "u.csv"), "--k", "9"], capsys)
    assert code == 1 and err["error"] == "ValueError"


def test_console_entry_point(tmp_path):
    np.savetxt(tmp_path / "a.csv", [[0.0], [2.0]], delimiter=",")
    proc = subprocess.run([sys.executable, "-m", "csrae.cli", "frechet", str(tmp_path / "a.csv"),
                           str(tmp_path / "a.csv")], capture_output=True, text=True)
    assert proc.returncode == 0 and abs(json.loads(proc.stdout)["frechet_distance"]) < 1e-12
    proc = subprocess.run([sys.executable, "-m", "csrae.cli", "frechet", str(tmp_path / "missing.csv"),
                           str(tmp_path / "a.csv")], capture_output=True, text=True)
    assert proc.returncode == 1 and json.loads(proc.stderr)["error"] in ("FileNotFoundError", "OSError")


# -- end-to-end ------------------------------------------------------------------------

@pytest.mark.slow
def test_pinwheel_mixture_run_and_eval(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", seed=0, objective="mixture_csrae", lam=1.0, out=str(tmp_path / "run"),
                       prior={"type": "mog", "K": 4}, optimizer={"epochs": 200, "lr": 2e-3}, eval={"S": 100})
    code, out, _ = run(["train", "--config", cfg], capsys)
    assert code == 0
    scores = [json.loads(l)["model_selection_score"] for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    envelope = np.minimum.accumulate(scores)
    assert envelope[-1] < envelope[0] and out["best_epoch"] > 0
    code, ev, _ = run(["eval", "--config", cfg], capsys)
    assert code == 0 and ev["knn_error_k5"] < 0.10
