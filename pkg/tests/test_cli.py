"""End-to-end command-line flows on a small generated dataset."""

import json
import shutil

import numpy as np
import pytest

from c2fseg.cli import main
from c2fseg.data import load_features, restore_model, save_features


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    assert main(["gen-synth", "--out", str(root), "--videos", "10",
                 "--seed", "5"]) == 0
    return root


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory, data_dir):
    path = tmp_path_factory.mktemp("cli-ckpt") / "model.bin"
    rc = main(["train", "--data", str(data_dir), "--out", str(path),
               "--epochs", "1", "--seed", "5"])
    assert rc == 0
    return path


def test_gen_synth_writes_manifest(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert len(manifest) == 10
    assert (data_dir / "mapping.txt").exists()


def test_gen_synth_deterministic(tmp_path, data_dir):
    other = tmp_path / "again"
    assert main(["gen-synth", "--out", str(other), "--videos", "10",
                 "--seed", "5"]) == 0
    for p in sorted(data_dir.rglob("*")):
        if p.is_file():
            twin = other / p.relative_to(data_dir)
            assert twin.read_bytes() == p.read_bytes(), p.name


@pytest.mark.parametrize("argv", [
    ["--help"],
    ["gen-synth", "--help"],
    ["train", "--help"],
    ["pretrain", "--help"],
    ["icc", "--help"],
    ["eval", "--help"],
    ["linear-eval", "--help"],
    ["calibrate", "--help"],
    ["activity", "--help"],
])
def test_help_exits_cleanly(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 0


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["segment-everything"])
    assert exc.value.code == 2


def test_missing_config_file_exits_2(data_dir, tmp_path):
    rc = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "m.bin"),
               "--config", str(tmp_path / "absent.json")])
    assert rc == 2


def test_invalid_config_json_exits_2(data_dir, tmp_path):
    cfg = tmp_path / "broken.json"
    cfg.write_text("{not json")
    rc = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "m.bin"),
               "--config", str(cfg)])
    assert rc == 2
    cfg.write_text("[1, 2]")
    rc = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "m.bin"),
               "--config", str(cfg)])
    assert rc == 2


def test_eval_on_missing_split_exits_2(data_dir, ckpt, tmp_path):
    rc = main(["eval", "--ckpt", str(ckpt), "--data", str(data_dir),
               "--split", "val", "--report", str(tmp_path / "r.json")])
    assert rc == 2


def test_corrupt_checkpoint_exits_3(data_dir, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"WRNG" + b"\x00" * 16)
    rc = main(["eval", "--ckpt", str(bad), "--data", str(data_dir),
               "--report", str(tmp_path / "r.json")])
    assert rc == 3


def test_corrupt_features_exit_3(data_dir, tmp_path):
    broken = tmp_path / "broken-data"
    shutil.copytree(data_dir, broken)
    victim = next(broken.glob("features/*.feat"))
    victim.write_bytes(b"XXXX" + victim.read_bytes()[4:])
    rc = main(["train", "--data", str(broken), "--out", str(tmp_path / "m.bin"),
               "--epochs", "1"])
    assert rc == 3


def test_nan_features_exit_4(data_dir, tmp_path):
    poisoned = tmp_path / "nan-data"
    shutil.copytree(data_dir, poisoned)
    victim = next(poisoned.glob("features/*.feat"))
    shape = load_features(victim).shape
    save_features(victim, np.full(shape, np.nan))
    rc = main(["train", "--data", str(poisoned), "--out", str(tmp_path / "m.bin"),
               "--epochs", "1"])
    assert rc == 4


def test_train_writes_checkpoint_and_trace(data_dir, tmp_path):
    out = tmp_path / "m.bin"
    trace = tmp_path / "trace.csv"
    rc = main(["train", "--data", str(data_dir), "--out", str(out),
               "--trace-out", str(trace), "--epochs", "1", "--seed", "5"])
    assert rc == 0
    lines = trace.read_text().strip().splitlines()
    assert lines[0] == "epoch,ce,tr,total"
    assert len(lines) == 2
    model, _ = restore_model(out)
    assert model.cfg.num_classes == 6
    assert model.cfg.input_dim == 32


def test_flag_overrides_config_file(data_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 3, "seed": 5}))
    trace = tmp_path / "trace.csv"
    rc = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "a.bin"),
               "--trace-out", str(trace), "--config", str(cfg), "--epochs", "1"])
    assert rc == 0
    assert len(trace.read_text().strip().splitlines()) == 1 + 1
    rc = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "b.bin"),
               "--trace-out", str(trace), "--config", str(cfg)])
    assert rc == 0
    assert len(trace.read_text().strip().splitlines()) == 1 + 3


def test_train_checkpoint_bytes_deterministic(data_dir, tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    for out in (a, b):
        rc = main(["train", "--data", str(data_dir), "--out", str(out),
                   "--epochs", "1", "--seed", "9"])
        assert rc == 0
    assert a.read_bytes() == b.read_bytes()


def test_eval_report_round_trip(data_dir, ckpt, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for report in (a, b):
        rc = main(["eval", "--ckpt", str(ckpt), "--data", str(data_dir),
                   "--report", str(report), "--seed", "5"])
        assert rc == 0
    assert a.read_bytes() == b.read_bytes()
    payload = json.loads(a.read_text())
    assert set(payload) == {"mof", "edit", "f1_10", "f1_25", "f1_50",
                            "frames", "videos"}
    assert payload["videos"] == 3  # one held-out clip per activity


def test_linear_eval_raw_baseline(data_dir, tmp_path):
    report = tmp_path / "probe.json"
    rc = main(["linear-eval", "--ckpt", "unused.bin", "--data", str(data_dir),
               "--report", str(report), "--raw-baseline", "--epochs", "20"])
    assert rc == 0
    assert 0.0 <= json.loads(report.read_text())["mof"] <= 100.0


def test_calibrate_writes_both_csvs(data_dir, ckpt, tmp_path):
    out, ent = tmp_path / "cal.csv", tmp_path / "ent.csv"
    rc = main(["calibrate", "--ckpt", str(ckpt), "--data", str(data_dir),
               "--bins", "10", "--out", str(out), "--entropy-out", str(ent)])
    assert rc == 0
    cal_lines = out.read_text().strip().splitlines()
    assert cal_lines[0] == "bin_lo,bin_hi,count,acc,conf,gap"
    assert len(cal_lines) == 1 + 10
    ent_lines = ent.read_text().strip().splitlines()
    assert ent_lines[0] == "bin_lo,bin_hi,count"
    assert float(ent_lines[-1].split(",")[1]) == pytest.approx(np.log(6))


def test_activity_train_then_eval(data_dir, tmp_path):
    out = tmp_path / "act.bin"
    rc = main(["activity", "train", "--data", str(data_dir), "--out", str(out),
               "--epochs", "1", "--seed", "5"])
    assert rc == 0
    report = tmp_path / "act.json"
    rc = main(["activity", "eval", "--data", str(data_dir), "--ckpt", str(out),
               "--report", str(report)])
    assert rc == 0
    payload = json.loads(report.read_text())
    assert set(payload) == {"accuracy", "videos"}


def test_activity_train_requires_out(data_dir):
    with pytest.raises(SystemExit) as exc:
        main(["activity", "train", "--data", str(data_dir)])
    assert exc.value.code == 2
