import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from mocritic.cli import main
from mocritic.diffusion import GeneratorModel
from mocritic.preference import ChoiceQuestion, save_questions

TINY_CRITIC = {"embed_dim": 8, "layers": 1, "heads": 2, "ff_dim": 8, "head_hidden": 8, "epochs": 2, "batch_size": 8}
TINY_GEN = {"width": 16, "depth": 1, "time_dim": 8, "label_dim": 4}


def snapshot(out: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(out)): p.read_bytes()
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "timing.json"
    }


def run(*args) -> int:
    return main([str(a) for a in args])


def run_twice(out: Path, *args) -> dict[str, bytes]:
    assert run(*args, "--out", out, "--quiet") == 0
    first = snapshot(out)
    assert run(*args, "--out", out, "--quiet") == 0
    assert snapshot(out) == first
    return first


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    specs = root / "specs.jsonl"
    specs.write_text('{"kind": "gaussian_jitter", "scale": 0.2}\n{"kind": "pop", "scale": 1.5}\n')
    assert run("gen-data", "--pool", 10, "--specs", specs, "--seed", 3, "--labelled", "--out", root / "data", "--quiet") == 0
    (root / "critic.json").write_text(json.dumps(TINY_CRITIC))
    assert run("train-critic", "--pairs", root / "data/pairs.jsonl", "--motions", root / "data/motions",
               "--config", root / "critic.json", "--out", root / "critic", "--quiet") == 0
    (root / "gen.json").write_text(json.dumps(TINY_GEN))
    assert run("train-gen", "--motions", root / "data/motions", "--steps", 3, "--config", root / "gen.json",
               "--out", root / "gen", "--quiet") == 0
    return root


def test_gen_data_counts_and_determinism(workspace, tmp_path):
    manifest = json.loads((workspace / "data/manifest.json").read_text())
    assert manifest["pairs"] == 20 and manifest["clean"] == 10 and manifest["seed"] == 3
    assert set(manifest["versions"]) >= {"numpy", "scipy", "mocritic", "python"}
    assert json.loads((workspace / "data/timing.json").read_text())["wall_seconds"] >= 0
    run_twice(tmp_path / "again", "gen-data", "--pool", 4, "--specs", workspace / "specs.jsonl", "--seed", 3)


def test_corrupt_spec_file_names_line(workspace, tmp_path, capsys):
    bad = tmp_path / "specs.jsonl"
    bad.write_text('{"kind": "pop", "scale": 1}\n{"kind": "pop"\n')
    assert run("gen-data", "--pool", 2, "--specs", bad, "--out", tmp_path / "o") == 2
    assert "specs.jsonl:2" in capsys.readouterr().err


def test_unknown_config_key_rejected(workspace, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"embed_dim": 8, "heads": 2, "colour": "red"}))
    code = run("train-critic", "--pairs", workspace / "data/pairs.jsonl", "--motions", workspace / "data/motions",
               "--config", cfg, "--out", tmp_path / "o")
    assert code == 2
    assert "colour" in capsys.readouterr().err


def test_train_critic_outputs(workspace):
    assert (workspace / "critic/critic.mcrt").read_bytes()[:4] == b"MCRT"
    rows = (workspace / "critic/history.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,heldout_accuracy" and len(rows) == 3


def test_train_critic_determinism(workspace, tmp_path):
    run_twice(tmp_path / "c", "train-critic", "--pairs", workspace / "data/pairs.jsonl",
              "--motions", workspace / "data/motions", "--config", workspace / "critic.json")


def test_score_orders_by_filename(workspace, tmp_path):
    motions = tmp_path / "five"
    motions.mkdir()
    for name in sorted(p.name for p in (workspace / "data/motions").iterdir())[:5]:
        (motions / name).write_bytes((workspace / "data/motions" / name).read_bytes())
    out = run_twice(tmp_path / "s", "score", "--model", workspace / "critic/critic.mcrt", "--motions", motions)
    rows = list(csv.reader(out["scores.csv"].decode().splitlines()))
    names = [r[0] for r in rows[1:]]
    assert len(names) == 5 and names == sorted(names)


def test_eval_metrics_with_constant_control(workspace, tmp_path):
    out = run_twice(tmp_path / "m", "eval-metrics", "--pairs", workspace / "data/pairs.jsonl",
                    "--motions", workspace / "data/motions", "--metrics", "jerk,pfc,constant,critic",
                    "--model", workspace / "critic/critic.mcrt")
    rows = {r["metric"]: r for r in csv.DictReader(out["metrics.csv"].decode().splitlines())}
    assert set(rows) == {"jerk", "pfc", "constant", "critic"}
    assert float(rows["constant"]["log_loss"]) == pytest.approx(math.log(2), abs=1e-12)
    assert float(rows["jerk"]["accuracy"]) >= 0.95


def test_eval_metrics_reference_based(workspace, tmp_path):
    clean = tmp_path / "clean"
    clean.mkdir()
    for p in (workspace / "data/motions").iterdir():
        if "_p" not in p.stem:
            (clean / p.name).write_bytes(p.read_bytes())
    assert run("eval-metrics", "--pairs", workspace / "data/pairs.jsonl", "--motions", workspace / "data/motions",
               "--metrics", "joint_ae,npss", "--reference", clean, "--format", "json", "--out", tmp_path / "r") == 0
    rep = json.loads((tmp_path / "r/metrics.json").read_text())
    assert {r["metric"] for r in rep["reports"]} == {"joint_ae", "npss"}
    assert run("eval-metrics", "--pairs", workspace / "data/pairs.jsonl", "--motions", workspace / "data/motions",
               "--metrics", "joint_ae", "--out", tmp_path / "r2") == 2


def test_finetune_zero_iterations_is_identity(workspace, tmp_path):
    assert run("finetune", "--gen", workspace / "gen/gen.mgen", "--critic", workspace / "critic/critic.mcrt",
               "--motions", workspace / "data/motions", "--iterations", 0, "--out", tmp_path / "f") == 0
    assert (tmp_path / "f/gen.mgen").read_bytes() == (workspace / "gen/gen.mgen").read_bytes()


def test_finetune_runs_and_is_deterministic(workspace, tmp_path):
    cfg = tmp_path / "ft.json"
    cfg.write_text(json.dumps({"lr": 1e-4, "sample_batch": 2, "batch_size": 4}))
    out = run_twice(tmp_path / "f", "finetune", "--gen", workspace / "gen/gen.mgen",
                    "--critic", workspace / "critic/critic.mcrt", "--motions", workspace / "data/motions",
                    "--config", cfg, "--iterations", 2, "--eval-samples", 2)
    assert out["gen.mgen"] != (workspace / "gen/gen.mgen").read_bytes()
    assert len(out["diagnostics.csv"].decode().splitlines()) == 3
    GeneratorModel.load(tmp_path / "f/gen.mgen")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finetune_numeric_fault_exit_code(workspace, tmp_path, capsys):
    cfg = tmp_path / "ft.json"
    cfg.write_text(json.dumps({"lr": 1e300, "sample_batch": 2, "batch_size": 4}))
    code = run("finetune", "--gen", workspace / "gen/gen.mgen", "--critic", workspace / "critic/critic.mcrt",
               "--motions", workspace / "data/motions", "--config", cfg, "--iterations", 3, "--out", tmp_path / "f")
    assert code == 3
    assert "fault_state.mgen" in capsys.readouterr().err
    assert (tmp_path / "f/fault_state.mgen").exists()


def test_elo_command(tmp_path):
    log = tmp_path / "m.csv"
    log.write_text("a,b,outcome\nA,B,a_wins\nB,C,tie\nA,C,b_wins\n")
    out = run_twice(tmp_path / "e", "elo", "--matches", log)
    rows = {r["subset"]: r for r in csv.DictReader(out["elo.csv"].decode().splitlines())}
    assert float(rows["B"]["rating"]) == pytest.approx(1484.736306793522, abs=1e-9)
    assert rows["A"]["matches"] == "2"
    assert "win_rate.csv" in out


def test_sensitivity_command(workspace, tmp_path):
    out = run_twice(tmp_path / "s", "sensitivity", "--model", workspace / "critic/critic.mcrt",
                    "--pool", workspace / "data/motions", "--scales", "0.05,0.2")
    assert out["sweep.csv"].decode().splitlines()[0] == "scale,accuracy,mean_score,std_score"
    assert run("sensitivity", "--model", workspace / "critic/critic.mcrt", "--pool", workspace / "data/motions",
               "--scales", "0.2,0.05", "--out", tmp_path / "bad") == 2


def test_features_and_ensemble_commands(workspace, tmp_path):
    feats = run_twice(tmp_path / "f", "features", "--pairs", workspace / "data/pairs.jsonl",
                      "--motions", workspace / "data/motions", "--model", workspace / "critic/critic.mcrt")
    header = feats["features.csv"].decode().splitlines()[0]
    assert header == "motion,critic,acceleration,jerk,ground_contact,pfc"
    for method in ("logistic", "linear_margin", "mlp"):
        out = run_twice(tmp_path / method, "ensemble", "--features", tmp_path / "f/features.csv",
                        "--pairs", workspace / "data/pairs.jsonl", "--method", method, "--ablate")
        rep = json.loads(out["ensemble.json"])
        assert rep["method"] == method and 0 <= rep["test_accuracy"] <= 1
        assert len(rep["ablation"]["added"]) == len(rep["features"])


def test_consensus_command(tmp_path):
    qs = [ChoiceQuestion(f"q{i}", "p", ("a", "b", "c", "d"), (i + k) % 2, annotator=f"r{k}")
          for i in range(4) for k in range(2)]
    save_questions(qs, tmp_path / "ann.jsonl")
    out = run_twice(tmp_path / "c", "consensus", "--annotations", tmp_path / "ann.jsonl")
    stats = json.loads(out["consensus.json"])
    assert stats["n_questions"] == 4 and stats["unanimous_fraction"] == 0.0


def test_missing_input_is_io_error(tmp_path):
    assert run("elo", "--matches", tmp_path / "nope.csv", "--out", tmp_path / "o") == 1


def test_mc_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("MC_THREADS", "1")
    log = tmp_path / "m.csv"
    log.write_text("a,b,outcome\nA,B,tie\n")
    assert run("elo", "--matches", log, "--out", tmp_path / "e") == 0
