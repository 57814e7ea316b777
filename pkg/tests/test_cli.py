import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from avsync.cli import OUT_ROOT_ENV, main, read_ablation_table

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml")


def run(*argv):
    return main(["--log-level", "WARNING", *argv])


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    """gen-corpus, pretrain-head and train once on the smoke config under one output root."""
    root = tmp_path_factory.mktemp("runs")
    mp = pytest.MonkeyPatch()
    mp.setenv(OUT_ROOT_ENV, str(root))
    for cmd in ("gen-corpus", "pretrain-head", "train"):
        assert run(cmd, "--config", SMOKE) == 0
    yield root
    mp.undo()


@pytest.fixture
def env(root, monkeypatch):
    monkeypatch.setenv(OUT_ROOT_ENV, str(root))
    return root


def test_pipeline_outputs(root):
    corpus = root / "gen-corpus"
    assert {p.name for p in corpus.iterdir()} >= {"corpus.json", "manifest.json", "train", "val", "test"}
    assert (root / "pretrain-head" / "head.npz").exists()
    train = root / "train"
    for name in ("checkpoint.npz", "train_log.jsonl", "losses.png", "manifest.json"):
        assert (train / name).exists(), name
    manifest = json.loads((train / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 0
    assert manifest["resolved_config"]["train"]["steps"] == 3
    assert len((train / "train_log.jsonl").read_text().splitlines()) == 3


def test_gen_corpus_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("gen-corpus", "--config", SMOKE, "--out", str(tmp_path / name)) == 0
    for split in ("train", "val", "test"):
        a = (tmp_path / "a" / split / "index.jsonl").read_bytes()
        assert a == (tmp_path / "b" / split / "index.jsonl").read_bytes()
    assert run("gen-corpus", "--config", SMOKE, "--seed", "7", "--out", str(tmp_path / "c")) == 0
    assert (tmp_path / "c" / "train" / "index.jsonl").read_bytes() != (tmp_path / "a" / "train" / "index.jsonl").read_bytes()


def test_refuses_non_empty_out_without_force(tmp_path, capsys):
    out = tmp_path / "x"
    out.mkdir()
    (out / "keep").write_text("1")
    assert run("gen-corpus", "--config", SMOKE, "--out", str(out)) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("E_CONFIG: ")
    assert run("gen-corpus", "--config", SMOKE, "--out", str(out), "--force") == 0


def test_missing_prerequisites(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path / "empty"))
    for argv in (["train", "--config", SMOKE], ["eval", "--task", "vsr", "--config", SMOKE],
                 ["heatmap", "--config", SMOKE]):
        assert run(*argv) == 2
        err = capsys.readouterr().err.strip()
        assert err.startswith("E_MISSING: ") and "\n" not in err
    assert not (tmp_path / "empty").exists() or not any((tmp_path / "empty").rglob("manifest.json"))


def test_env_var_sets_default_root(env):
    assert (env / "train" / "manifest.json").exists()


@pytest.mark.parametrize("task,metric", [("vsr", "wer"), ("sync", "auc"), ("asd_lite", "accuracy"),
                                         ("avsr_noisy", "wer"), ("avsr_clean", "wer")])
def test_eval_tasks(env, tmp_path, task, metric, capsys):
    out = tmp_path / task
    assert run("eval", "--config", SMOKE, "--task", task, "--snr", "0", "--out", str(out)) == 0
    rec = json.loads((out / "results.jsonl").read_text())
    assert rec["task"].lower() == task and rec["metric_name"] == metric
    rows = list(csv.DictReader(open(out / "results.csv")))
    assert len(rows) == 1 and rows[0]["metric"] == metric
    if task == "avsr_noisy":
        assert rec["conditions"]["snr_db"] == 0.0 and "baseline" in rec
    else:
        assert rec["conditions"]["snr_db"] == "clean"


def test_eval_appends(env, tmp_path):
    out = tmp_path / "e"
    assert run("eval", "--config", SMOKE, "--task", "vsr", "--out", str(out)) == 0
    assert run("eval", "--config", SMOKE, "--task", "sync", "--out", str(out), "--force") == 0
    assert len((out / "results.jsonl").read_text().splitlines()) == 2
    assert [r["task"] for r in csv.DictReader(open(out / "results.csv"))] == ["VSR", "SYNC"]


def test_eval_bad_task(env, capsys):
    assert run("eval", "--config", SMOKE, "--task", "karaoke") == 2
    assert capsys.readouterr().err.startswith("E_CONFIG: ")


def test_heatmap(env, tmp_path):
    out = tmp_path / "hm"
    assert run("heatmap", "--config", SMOKE, "--out", str(out), "--index", "1") == 0
    summary = json.loads((out / "heatmap.json").read_text())
    S = np.loadtxt(out / "heatmap.csv", delimiter=",", comments="#", ndmin=2)
    assert S.shape[0] == S.shape[1] and np.all(np.abs(S) <= 1.0)
    assert (out / "heatmap.png").exists() and (out / "heatmap_figure.png").exists()
    assert summary["band"] == 1


def test_ablate_lambda(env, tmp_path):
    out = tmp_path / "ab"
    assert run("ablate", "--config", SMOKE, "--axis", "lambda", "--values", "0", "1", "--out", str(out)) == 0
    rows = read_ablation_table(out / "ablation.csv")
    assert [r["lambda"] for r in rows] == ["0.0", "1.0"]
    assert set(rows[0]) == {"lambda", "vsr_wer", "avsr_noisy_wer", "sync_auc", "audio_only_wer"}
    assert (out / "ablation.png").exists()
    assert (out / "lambda=0.0" / "checkpoint.npz").exists()


@pytest.mark.parametrize("argv", [["--axis", "lambda"], ["--axis", "lambda", "--values"],
                                  ["--axis", "depth", "--values", "1"],
                                  ["--axis", "modality", "--values", "0.5/0.5"],
                                  ["--axis", "adapter", "--values", "weird"]])
def test_ablate_invalid(env, tmp_path, argv, capsys):
    assert run("ablate", "--config", SMOKE, "--out", str(tmp_path / "bad"), *argv) == 2
    assert capsys.readouterr().err.startswith("E_CONFIG: ")


def test_console_script_error_line(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "avsync.cli", "train", "--config", str(tmp_path / "nope.yaml")],
                          capture_output=True, text=True, env={"PATH": "", OUT_ROOT_ENV: str(tmp_path)})
    assert proc.returncode == 2
    assert proc.stderr.strip().startswith("E_MISSING: ") and len(proc.stderr.strip().splitlines()) == 1
