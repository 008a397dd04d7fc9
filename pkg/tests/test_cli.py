import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from cliqueformer.cli import main


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        yaml.safe_dump(
            {
                "n_samples": 300,
                "model": {"d_model": 8, "ff_hidden": 16, "mlp_hidden": 16},
                "training": {"steps": 3, "batch_size": 16},
                "design": {"steps": 2},
                "baseline": {"train_steps": 3, "design_steps": 2, "hidden": 8},
            }
        )
    )
    return str(path)


def run(*args):
    result = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    return result


def test_help_lists_subcommands():
    out = run("--help").output
    for name in ("generate", "train", "design", "evaluate", "bench", "ablate", "demo-rotation", "demo-fgm"):
        assert name in out


def test_pipeline(tmp_path, config):
    r = run("generate", "--task", "latrbf11", "--config", config, "--out", tmp_path / "data")
    assert r.exit_code == 0 and (tmp_path / "data" / "task.npz").exists()
    assert json.loads(r.output)["rows"] < 300
    r = run("train", "--task", "latrbf11", "--config", config, "--out", tmp_path / "m", "--seed", 1)
    assert r.exit_code == 0 and (tmp_path / "m" / "model.pt").exists() and (tmp_path / "m" / "curves.csv").exists()
    r = run("design", "--task", "latrbf11", "--config", config, "--checkpoint", tmp_path / "m" / "model.pt",
            "--batch-size", 20, "--out", tmp_path / "c")
    assert r.exit_code == 0
    assert np.load(tmp_path / "c" / "candidates.npz")["designs"].shape == (20, 22)
    r = run("evaluate", "--task", "latrbf11", "--config", config, "--candidates", tmp_path / "c" / "candidates.npz",
            "--top-k", 5, "--out", tmp_path / "c")
    assert r.exit_code == 0
    row = json.loads((tmp_path / "c" / "eval.json").read_text())
    assert row["top_k"] == 5 and 0 <= row["validity"] <= 1


def test_evaluate_rejects_large_k(tmp_path, config):
    np.savez(tmp_path / "c.npz", designs=np.zeros((3, 22)))
    r = CliRunner().invoke(main, ["evaluate", "--task", "latrbf11", "--config", config, "--candidates",
                                  str(tmp_path / "c.npz"), "--top-k", "10"])
    assert r.exit_code == 2 and "top_k" in r.output


def test_bench_baseline(tmp_path, config):
    r = run("bench", "--task", "latrbf11", "--method", "gradasc", "--seeds", 2, "--metric", "top1of128",
            "--config", config, "--out", tmp_path)
    assert r.exit_code == 0
    summary = json.loads(r.output)
    assert summary["seeds"] == [0, 1] and summary["method"] == "gradasc"
    assert (tmp_path / "results-gradasc-latrbf11.csv").exists()


def test_train_rejects_baseline(config):
    r = CliRunner().invoke(main, ["train", "--task", "latrbf11", "--method", "rwr", "--config", config])
    assert r.exit_code == 2


def test_bad_config_key(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("flavour: 3\n")
    r = CliRunner().invoke(main, ["bench", "--config", str(path)])
    assert r.exit_code == 2 and "flavour" in r.output


def test_unknown_method():
    r = CliRunner().invoke(main, ["bench", "--method", "bo"])
    assert r.exit_code == 2


def test_ablate(tmp_path, config):
    r = run("ablate", "--task", "latrbf11", "--variant", "base", "--variant", "no_weight_decay", "--seeds", 1,
            "--config", config, "--out", tmp_path)
    assert r.exit_code == 0
    assert "no_weight_decay" in r.output
    assert len(json.loads((tmp_path / "ablation.json").read_text())) == 2


def test_demo_rotation():
    r = run("demo-rotation", "--l", 2, "--l", 4, "--probes", 5)
    rows = json.loads(r.output)
    assert [row["l"] for row in rows] == [2, 4]
    assert all(row["dependence_gap"] > 1e3 for row in rows)
    assert CliRunner().invoke(main, ["demo-rotation", "--l", "1"]).exit_code == 2
