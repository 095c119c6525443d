import csv
import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from fine_imitate.cli import default_config, main, resolve_config

TINY = {
    "data": {"num_images": 8, "num_test": 4, "image_size": 32, "max_size": 20, "seed": 1},
    "teacher": {"backbone_widths": [4, 8, 8, 8]},
    "student": {"width_mult": 0.5},
    "train": {"iterations": 3, "batch_size": 4},
    "distill": {"lam": 0.5},
    "sweep": {"psis": [0, 0.1, 0.5, 0.9, 1.0], "seeds": [0]},
    "compare": {"seeds": [0]},
    "variance": {"num_images": 3},
}


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["generate-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train-teacher", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "teacher")]) == 0
    return root, str(cfg)


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_resolution_order(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr": 0.5, "iterations": 7}}))
    cfg = resolve_config(str(path), ["train.lr=0.25", "distill.mask=hard"], seed=9)
    assert cfg["train"]["lr"] == 0.25 and cfg["train"]["iterations"] == 7
    assert cfg["train"]["seed"] == 9 and cfg["distill"]["mask"] == "hard"
    assert resolve_config(None, [], None) == default_config()


def test_unknown_key_is_error(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert json.loads(err[0])["error"] == "config"


def test_bad_value_is_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "o"), "--override", "distill.psi=3"]) != 0
    assert "psi" in json.loads(capsys.readouterr().err)["message"]


def test_missing_teacher_is_error(tmp_path, capsys):
    assert main(["distill", "--teacher", str(tmp_path / "nope.npz"), "--out", str(tmp_path / "o"),
                 "--override", "train.iterations=1"]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_generate_data_outputs(setup):
    root, _ = setup
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["command"] == "generate-data" and manifest["config"]["data"]["num_images"] == 8
    assert {"started", "finished", "version", "seed"} <= set(manifest)
    assert len((root / "data" / "train.jsonl").read_text().splitlines()) == 8
    assert len((root / "data" / "test.jsonl").read_text().splitlines()) == 4


def test_distill_lambda_zero_matches_train(setup):
    root, cfg = setup
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "plain")]) == 0
    assert main(["distill", "--config", cfg, "--data", str(root / "data"), "--teacher",
                 str(root / "teacher" / "checkpoint.npz"), "--override", "distill.lam=0",
                 "--out", str(root / "lam0")]) == 0
    a = json.loads((root / "plain" / "metrics.json").read_text())
    b = json.loads((root / "lam0" / "metrics.json").read_text())
    assert a["mAP"] == b["mAP"] and a["params_sha256"] == b["params_sha256"]


def test_sweep_emits_five_rows(setup):
    root, cfg = setup
    assert main(["sweep-psi", "--config", cfg, "--data", str(root / "data"), "--teacher",
                 str(root / "teacher" / "checkpoint.npz"), "--out", str(root / "sweep")]) == 0
    rows = list(csv.DictReader((root / "sweep" / "sweep.csv").open()))
    assert [float(r["psi"]) for r in rows] == [0, 0.1, 0.5, 0.9, 1.0]


def test_visualize_psi_one_has_no_cells(setup):
    root, cfg = setup
    out = root / "vis1"
    assert main(["visualize-mask", "--config", cfg, "--data", str(root / "data"),
                 "--override", "visualize.psi=1", "--out", str(out)]) == 0
    assert json.loads((out / "overlay.json").read_text()) == []
    assert json.loads((out / "metrics.json").read_text())["n_positive"] == 0
    assert Image.open(out / "overlay.png").size == (32, 32)


def test_visualize_hard_threshold(setup):
    root, cfg = setup
    out = root / "vis_hard"
    assert main(["visualize-mask", "--config", cfg, "--data", str(root / "data"),
                 "--override", "visualize.hard_threshold=0.3", "--out", str(out)]) == 0
    rects = json.loads((out / "overlay.json").read_text())
    assert len(rects) == json.loads((out / "metrics.json").read_text())["n_positive"]


def test_analyze_variance(setup):
    root, cfg = setup
    out = root / "var"
    assert main(["analyze-variance", "--config", cfg, "--data", str(root / "data"), "--teacher",
                 str(root / "teacher" / "checkpoint.npz"), "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["num_images"] == 3 and m["channels"] == 8
    assert 0 <= m["fraction_in_lt_out"] <= 1
    rows = list(csv.DictReader((out / "variance.csv").open()))
    assert len(rows) == 8 and all(float(r["var_in"]) >= 0 for r in rows)


def test_rerun_reproduces_metrics(setup):
    root, cfg = setup
    teacher = str(root / "teacher" / "checkpoint.npz")
    data = str(root / "data")
    for args in (["generate-data"], ["train", "--data", data], ["distill", "--data", data, "--teacher", teacher],
                 ["compare-baselines", "--data", data, "--teacher", teacher]):
        digests = []
        for rep in range(2):
            out = root / f"rerun_{args[0]}_{rep}"
            assert main(args + ["--config", cfg, "--seed", "4", "--out", str(out)]) == 0
            digests.append(_sha(out / "metrics.json"))
        assert digests[0] == digests[1], args[0]
