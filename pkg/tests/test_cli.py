import json

import numpy as np
import pytest
from scipy.io import savemat

from crowdcl.cli import main
from crowdcl.dataset import load_dataset


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["synth", "--out", str(root), "--n-train", "16", "--n-test", "6", "--size", "32x32",
                 "--seed", "4"]) == 0
    return root


def test_synth_layout(synth_root):
    assert load_dataset(synth_root, "train").N == 16
    assert load_dataset(synth_root, "test").split == "test"


def test_score_and_plan(synth_root, tmp_path, capsys):
    scored = tmp_path / "s.json"
    assert main(["score", "--data", str(synth_root), "--out", str(scored)]) == 0
    rows = json.loads(scored.read_text())
    assert len(rows) == 16
    assert [r["score"] for r in rows] == sorted(r["score"] for r in rows)
    plan = tmp_path / "p.json"
    assert main(["plan", "--scored", str(scored), "--T", "10", "--batch-size", "4", "--b", "0.5",
                 "--shape", "step", "--out", str(plan)]) == 0
    doc = json.loads(plan.read_text())
    # step, K=4: u(1) = 1 / (0.4 * 10) = 1/4 -> one quarter of the remaining 8 samples on top of 8
    assert len(doc["batches"]) == 10 and doc["g"][0] == 10


def test_train_eval(synth_root, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(synth_root), "--epochs", "1", "--batch-size", "4", "--lr", "1e-3",
                 "--channels", "0.5", "--out", str(run)]) == 0
    assert (run / "model.ckpt").is_file() and (run / "trace_steps.csv").is_file()
    assert main(["eval", "--data", str(synth_root), "--checkpoint", str(run / "model.ckpt"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert "MAE" in capsys.readouterr().out
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["n"] == 6


def test_train_config_file(synth_root, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"family": "multi_column", "channels": 0.5},
                               "train": {"mode": "curriculum", "epochs": 1, "batch_size": 4,
                                         "pacing": {"shape": "root", "b": 0.5}}}))
    assert main(["train", "--data", str(synth_root), "--config", str(cfg), "--lr", "1e-3",
                 "--out", str(tmp_path / "r")]) == 0
    saved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert saved["train"]["pacing"]["shape"] == "root" and saved["train"]["lr_initial"] == 1e-3


def test_exit_code_config_errors(synth_root, tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 1
    assert main(["train", "--data", str(synth_root), "--mode", "curriculum", "--b", "0.01",
                 "--batch-size", "4", "--out", str(tmp_path / "r")]) == 1
    (tmp_path / "bad.json").write_text("{")
    assert main(["matrix", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "m")]) == 1
    assert main(["table", "--out", str(tmp_path / "empty")]) == 1


def test_exit_code_run_failure(synth_root, tmp_path):
    assert main(["train", "--data", str(synth_root), "--epochs", "2", "--batch-size", "4", "--lr", "1e30",
                 "--val-fraction", "0", "--out", str(tmp_path / "r")]) == 2


def test_matrix_table_curves(tmp_path, capsys):
    cfg = {
        "datasets": [{"name": "tiny", "kind": "synthetic", "n_train": 16, "n_test": 6, "image_size": [32, 32],
                      "count_range": [2, 20], "seed": 1}],
        "models": [{"name": "small", "family": "multi_column", "channels": 0.5}],
        "arms": [{"mode": "standard"}, {"mode": "curriculum", "shape": "linear", "b": 0.5},
                 {"mode": "curriculum", "shape": "linear", "b": 0.01, "label": "broken"}],
        "train": {"epochs": 1, "batch_size": 4, "lr_initial": 1e-3},
    }
    path = tmp_path / "m.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "results"
    assert main(["matrix", "--config", str(path), "--out", str(out)]) == 2
    capsys.readouterr()
    assert main(["table", "--out", str(out), "--format", "markdown"]) == 0
    text = capsys.readouterr().out
    assert "| small |" in text and "broken" not in text
    ids = sorted(p.parent.name for p in out.glob("runs/*/result.json"))
    labels = {json.loads((out / "runs" / i / "result.json").read_text())["arm"]: i for i in ids}
    assert main(["curves", "--out", str(out), "--standard", labels["Standard"],
                 "--curriculum", labels["Linear"], "--curves-dir", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "convergence.png").is_file()
    assert main(["curves", "--out", str(out), "--standard", "x", "--curriculum", "y"]) == 1


def test_matrix_dry_run_reference(capsys):
    assert main(["matrix", "--preset", "reference", "--dry-run"]) == 0
    assert capsys.readouterr().out.strip().endswith("112 cells")


def test_reference_table(capsys):
    assert main(["table", "--reference", "B"]) == 0
    out = capsys.readouterr().out
    assert "19.2*/32.2*" in out


def test_ingest_mat(tmp_path):
    from PIL import Image

    imgs, mats = tmp_path / "img", tmp_path / "gt"
    imgs.mkdir()
    mats.mkdir()
    for k in range(2):
        Image.fromarray(np.zeros((20, 30, 3), np.uint8)).save(imgs / f"IMG_{k}.jpg")
        pts = np.array([[3.0, 4.0], [10.5, 12.0], [29.0, 19.0]])[: k + 2]
        info = np.empty((1, 1), dtype=object)
        info[0, 0] = np.array([[(pts, np.array([[len(pts)]]))]], dtype=[("location", "O"), ("number", "O")])
        savemat(mats / f"GT_IMG_{k}.mat", {"image_info": info})
    out = tmp_path / "ds"
    assert main(["ingest", "--images", str(imgs), "--annotations", str(mats), "--out", str(out)]) == 0
    m = load_dataset(out, "train")
    assert [s.count for s in m] == [2, 3]
    (imgs / "IMG_9.jpg").write_bytes((imgs / "IMG_0.jpg").read_bytes())
    assert main(["ingest", "--images", str(imgs), "--annotations", str(mats), "--out", str(tmp_path / "x")]) == 1
