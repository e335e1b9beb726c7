import csv
import json
import subprocess
import sys

import pytest

from hsefss.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from hsefss.params import read_snapshot

TRAIN_FLAGS = ["--epochs", "1", "--episodes-per-epoch", "8", "--channels", "8"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(root), "--seed", "1", "--extent", "32", "--train-per-class", "6", "--test-per-class", "4"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data):
    out = data.parent / "run" / "model.hseb"
    assert main(["train", "--data", str(data), "--out", str(out), "--variant", "sd3,gc2"] + TRAIN_FLAGS) == 0
    return out


def test_gen_data_layout(data):
    assert (data / "manifest.json").exists() and (data / "embeddings.jsonl").exists()
    assert len(list((data / "test" / "circle").glob("img_*.png"))) == 4


def test_train_outputs(trained):
    assert trained.exists() and (trained.parent / "model.hseb.json").exists()
    meta = read_snapshot(trained).meta
    assert meta["variant"] == "sd3,gc2" and meta["embeddings"]["source"] == "file"
    rows = list(csv.reader(open(trained.parent / "model.loss.csv")))
    assert rows[0] == ["epoch", "loss"] and len(rows) == 2
    assert (trained.parent / "model.loss.png").stat().st_size > 0


def test_train_synth_embeddings(data, tmp_path):
    out = tmp_path / "s.hseb"
    assert main(["train", "--data", str(data), "--out", str(out), "--synth-embeddings", "--ct", "6"] + TRAIN_FLAGS) == 0
    p = read_snapshot(out)
    assert p.meta["embeddings"] == {"source": "synth", "ct": 6, "seed": 7}
    assert p["proj_spatial.0.w"].shape == (6, 8)


def test_eval_outputs(data, trained, tmp_path, capsys):
    report = tmp_path / "r" / "eval.json"
    args = ["eval", "--data", str(data), "--params", str(trained), "--episodes", "6", "--seeds", "0,1", "--report", str(report)]
    assert main(args) == EXIT_OK
    payload = json.loads(report.read_text())
    assert payload["seeds"] == [0, 1] and payload["fold"] == 0
    assert "written_at" in json.loads((tmp_path / "r" / "eval.meta.json").read_text())
    assert (tmp_path / "r" / "eval.png").exists()
    assert list(csv.reader(open(tmp_path / "r" / "eval.csv")))[-1][0] == "mIoU"
    assert "mIoU" in capsys.readouterr().out


def test_predict_panels(data, trained, tmp_path):
    out = tmp_path / "pred.png"
    assert main(["predict", "--data", str(data), "--params", str(trained), "--episode-seed", "3", "--out", str(out)]) == 0
    for suffix in ("", "_query", "_truth", "_prior", "_pred"):
        assert (tmp_path / f"pred{suffix}.png").exists()


def test_ablate_outputs(data, tmp_path):
    report = tmp_path / "abl.json"
    args = ["ablate", "--data", str(data), "--variants", "off,off;sd3,gc2", "--seeds", "0", "--folds", "0,1", "--eval-episodes", "4"]
    assert main(args + TRAIN_FLAGS + ["--report", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert [r["variant"] for r in payload["rows"]] == ["off,off", "sd3,gc2"]
    for ext in ("txt", "csv", "png"):
        assert (tmp_path / f"abl.{ext}").exists()


def test_check_oracles(capsys):
    assert main(["check", "--oracles", "--cases", "20"]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("OK")


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--data", "x", "--out", "y", "--variant", "sd9,gc2"],
        ["eval", "--data", "x", "--params", "y", "--report", "z", "--seeds", "a,b"],
        ["ablate", "--data", "x", "--report", "z", "--folds", "0,5"],
        ["frobnicate"],
    ],
)
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == EXIT_USAGE


def test_check_without_suite():
    assert main(["check"]) == EXIT_USAGE


def test_missing_params_is_data_error(data, tmp_path):
    assert main(["eval", "--data", str(data), "--params", str(tmp_path / "none.hseb"), "--report", str(tmp_path / "r.json")]) == EXIT_DATA


def test_missing_dataset_is_data_error(trained, tmp_path):
    assert main(["eval", "--data", str(tmp_path / "nope"), "--params", str(trained), "--report", str(tmp_path / "r.json")]) == EXIT_DATA


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hsefss", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-data" in proc.stdout
