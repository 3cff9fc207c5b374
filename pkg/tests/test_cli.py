import argparse
import json

import pytest

from kptrain.cli import RunConfig, main, output_root
from kptrain.storage import read_manifest

SMALL_CONFIG = {
    "scene": {"image_size": 64, "n_tracks": 600},
    "dataset": {"n_train": 4, "n_test": 2, "train_seeds": [0, 100], "test_seeds": [500, 600], "pairs_per_scene": 2},
    "train": {"pairs_total": 4, "batch_size": 2, "train_resolution": 64, "n_checkpoints": 2, "target": {"k": 100}},
    "sample": {"budget": 100},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL_CONFIG))
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(root / "v2")]) == 0
    assert main(["train", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(root / "v1"),
                 "--v1-compat"]) == 0
    return root, cfg


def test_gen_writes_manifest(workspace):
    root, _ = workspace
    m = read_manifest(root / "data")
    assert len(m["train"]) == 4 and len(m["test"]) == 2 and m["config_hash"]


def test_train_writes_checkpoints(workspace):
    root, _ = workspace
    run = json.loads((root / "v2" / "run.json").read_text())
    assert run["checkpoints"] == ["checkpoint_000001.pt", "checkpoint_000002.pt"]
    assert all((root / "v2" / c).exists() for c in run["checkpoints"])
    assert len((root / "v2" / "metrics.jsonl").read_text().splitlines()) == 2
    v1 = json.loads((root / "v1" / "run.json").read_text())
    assert v1["config_hash"] != run["config_hash"]


def test_eval_and_plot(workspace, capsys):
    root, cfg = workspace
    out = root / "eval"
    assert main(["eval", str(root / "v2"), "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(out)]) == 0
    reports = sorted(out.glob("report_*.json"))
    assert len(reports) == 2
    curves = json.loads((out / "curves.json").read_text())
    assert curves["columns"] == ["step", "repeatability", "auc10", "maa10"]
    assert main(["plot", str(out), "--out", str(root / "plots")]) == 0
    assert list((root / "plots").glob("curves_*.png"))


def test_eval_refuses_mixed_configs(workspace, capsys):
    root, cfg = workspace
    args = ["eval", str(root / "v2"), str(root / "v1"), "--config", str(cfg), "--dataset", str(root / "data")]
    assert main(args + ["--out", str(root / "mixed")]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--out", str(root / "mixed"), "--force"]) == 0
    assert (root / "mixed" / "comparison.txt").exists()


def test_overlay_and_targets(workspace):
    root, cfg = workspace
    ck = sorted((root / "v2").glob("checkpoint_*.pt"))[-1]
    png = root / "ov" / "overlay.png"
    assert main(["overlay", str(ck), "--config", str(cfg), "--dataset", str(root / "data"),
                 "--top", "20", "--out", str(png)]) == 0
    assert png.exists()
    assert main(["targets", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(root / "tg")]) == 0
    assert (root / "tg" / "targets.json").exists()
    assert list((root / "tg").glob("*.npy"))


@pytest.mark.parametrize("argv", [
    ["train", "--dataset", "x", "--nms-window", "4"],
    ["train", "--dataset", "x", "--topk-scope", "global"],
    ["bogus"],
    [],
])
def test_usage_errors_exit_1(argv, tmp_path, capsys):
    assert main(argv + (["--out", str(tmp_path)] if argv and argv[0] == "train" else [])) == 1


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 1.0}}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_overlapping_seeds_refused(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": {"train_seeds": [0, 10], "test_seeds": [5, 20]}}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1
    assert "disjoint" in capsys.readouterr().err


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("KPTRAIN_OUT", str(tmp_path))
    assert output_root(argparse.Namespace(out=None), RunConfig(), "gen") == tmp_path / "gen"
    assert output_root(argparse.Namespace(out="x"), RunConfig(), "gen").name == "x"
