import csv
import io
import json
import subprocess
import sys

import pytest

from gsam.cli import RunConfig, main

SMALL = {
    "patch_size": 8, "embed_dim": 16, "depth": 1, "num_heads": 2, "bottleneck_dim": 4,
    "stage_channels": [4, 8, 8], "decoder_channels": [8, 8, 8], "epochs": 1, "batch_size": 4,
    "lr0": 1e-3,
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "shapes"
    assert main(["gen", "--out", str(out), "--n", "10", "--size", "48x48", "--classes", "3", "--seed", "7"]) == 0
    return out


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_gen_writes_pairs_and_manifest(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["n"] == 10 and manifest["num_classes"] == 3 and manifest["seed"] == 7
    assert len(list((dataset / "images").glob("*.png"))) == 10
    assert len(list((dataset / "labels").glob("*.png"))) == 10


def test_gen_byte_identical(dataset, tmp_path):
    again = tmp_path / "again"
    main(["gen", "--out", str(again), "--n", "10", "--size", "48x48", "--classes", "3", "--seed", "7"])
    for f in sorted(dataset.rglob("*.*")):
        assert (again / f.relative_to(dataset)).read_bytes() == f.read_bytes(), f.name


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen", "--out", str(tmp_path), "--n", "0"])
    assert e.value.code == 2
    assert "positive" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert "no dataset" in capsys.readouterr().err


def test_runtime_error_exits_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1


def test_unknown_config_key(tmp_path, dataset):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lr": 0.1}))
    assert main(["train", "--config", str(bad), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 1


def test_train_eval_and_config_echo(dataset, config_file, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--config", str(config_file), "--data", str(dataset), "--out", str(out),
                 "--crop", "32x32", "--adapter-variant", "no_dilated"])
    assert code == 0
    result = json.loads((out / "eval.json").read_text())
    assert 0.0 <= result["miou"] <= 1.0
    echoed = json.loads((out / "run_config.json").read_text())
    assert echoed["crop"] == [32, 32] and echoed["adapter_variant"] == "no_dilated"
    assert echoed["num_classes"] == 3
    for name in ("checkpoint.pt", "train_log.csv", "train_summary.json"):
        assert (out / name).exists()
    capsys.readouterr()

    assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--data", str(dataset)]) == 0
    evaluated = json.loads(capsys.readouterr().out)
    assert len(evaluated["per_class_iou"]) == 3

    # rerunning from the echoed config reproduces the outputs
    rerun = tmp_path / "rerun"
    assert main(["train", "--config", str(out / "run_config.json"), "--out", str(rerun)]) == 0
    assert (rerun / "train_log.csv").read_text() == (out / "train_log.csv").read_text()
    assert json.loads((rerun / "eval.json").read_text()) == result


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(epochs=3, crop=(32, 48))
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert RunConfig.load(str(path)) == cfg


def test_sweep_four_rows(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--sizes", "32,64,128,256", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 4
    totals = [int(r["total_macs"]) for r in rows]
    assert totals == sorted(totals) and len(set(totals)) == 4


def test_macs_json(tmp_path, config_file):
    out = tmp_path / "macs.json"
    assert main(["macs", "--config", str(config_file), "--size", "64x48", "--json", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["total_macs"] > 0


def test_gradcheck_subset_exit_0(capsys):
    assert main(["gradcheck", "--only", "conv3x3", "linear"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gsam.cli", "macs", "--size", "32"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("size_h,size_w,total_macs,total_params")
