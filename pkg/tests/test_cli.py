import subprocess
import sys

import pytest

from tinydl.checkpoint import encode, model_tensors
from tinydl.cli import main
from tinydl.config import load_config
from tinydl.model import build


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_count_params_rgb5_example(capsys, configs):
    code, out, _ = run(capsys, "count-params", "--config", configs / "rgb5.cfg")
    assert code == 0
    assert out.strip().splitlines()[-1] == "total=24097"
    for n in ("760", "1820", "840", "20512", "165"):
        assert n in out


def test_module_entry_point(configs):
    proc = subprocess.run([sys.executable, "-m", "tinydl", "count-params", "--config", str(configs / "cnn.cfg")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "total=410250" in proc.stdout


def test_missing_file_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "count-params", "--config", tmp_path / "nope.cfg")
    assert code == 2 and "nope.cfg" in err


def test_bad_config_exit_1_with_line(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("input 28 28 1\nflatten\ndense unitz=3\n")
    code, _, err = run(capsys, "count-params", "--config", cfg)
    assert code == 1 and "line 3" in err


def test_usage_errors_touch_no_files(capsys, tmp_path, configs, mnist_dir):
    out = tmp_path / "m.csv"
    out.write_text("keep")
    cases = [
        ["train", "--config", configs / "shallow.cfg", "--data-dir", mnist_dir, "--metrics-out", out],
        ["train", "--config", configs / "shallow.cfg", "--data-dir", mnist_dir, "--metrics-out", out,
         "--checkpoint-out", tmp_path / "c.dlck", "--iters", "-3"],
        ["train", "--config", configs / "shallow.cfg", "--data-dir", mnist_dir, "--metrics-out", out,
         "--checkpoint-out", tmp_path / "c.dlck", "--frobnicate"],
        ["attack", "--config", configs / "cnn.cfg", "--data-dir", mnist_dir, "--checkpoint-in", tmp_path / "x",
         "--output", out, "--epsilons", "0,abc"],
        ["bogus"],
    ]
    for argv in cases:
        code, _, _ = run(capsys, *argv)
        assert code == 1
    assert out.read_text() == "keep"
    assert not (tmp_path / "c.dlck").exists()


def test_missing_data_dir_exit_2(capsys, tmp_path, configs):
    code, _, err = run(capsys, "train", "--config", configs / "shallow.cfg", "--data-dir", tmp_path / "none",
                       "--metrics-out", tmp_path / "m.csv", "--checkpoint-out", tmp_path / "c.dlck")
    assert code == 2 and not (tmp_path / "m.csv").exists()


def test_zero_iterations_checkpoint_equals_init(capsys, tmp_path, configs, mnist_dir):
    ck = tmp_path / "c.dlck"
    code, _, _ = run(capsys, "train", "--config", configs / "mlp.cfg", "--data-dir", mnist_dir, "--iters", 0,
                     "--metrics-out", tmp_path / "m.csv", "--checkpoint-out", ck)
    assert code == 0
    assert ck.read_bytes() == encode(model_tensors(build(load_config(configs / "mlp.cfg"))))


def test_train_eval_extract_attack(capsys, tmp_path, configs, mnist_dir):
    ck, metrics = tmp_path / "c.dlck", tmp_path / "m.csv"
    code, out, _ = run(capsys, "train", "--config", configs / "shallow.cfg", "--data-dir", mnist_dir,
                       "--iters", 60, "--metrics-out", metrics, "--checkpoint-out", ck)
    assert code == 0
    reported = out.strip().splitlines()[-1].split("=")[1]
    last = metrics.read_text().strip().splitlines()[-1].split(",")
    assert last[0] == "60" and last[3] == reported

    code, out, _ = run(capsys, "eval", "--config", configs / "shallow.cfg", "--data-dir", mnist_dir,
                       "--checkpoint-in", ck)
    assert code == 0 and out.splitlines()[0] == f"accuracy={reported}"

    feats = tmp_path / "f.csv"
    code, _, _ = run(capsys, "extract", "--config", configs / "shallow.cfg", "--data-dir", mnist_dir,
                     "--checkpoint-in", ck, "--tap", 0, "--limit", 5, "--output", feats)
    rows = feats.read_text().splitlines()
    assert code == 0 and len(rows) == 6 and rows[0].startswith("index,label,f0,") and rows[0].endswith(",f783")

    code, _, _ = run(capsys, "extract", "--config", configs / "shallow.cfg", "--data-dir", mnist_dir,
                     "--checkpoint-in", ck, "--tap", 9, "--output", tmp_path / "g.csv")
    assert code == 1 and not (tmp_path / "g.csv").exists()

    report = tmp_path / "adv.csv"
    code, _, _ = run(capsys, "attack", "--config", configs / "shallow.cfg", "--data-dir", mnist_dir,
                     "--checkpoint-in", ck, "--limit", 200, "--epsilons", "0,0.1", "--output", report)
    lines = report.read_text().splitlines()
    assert code == 0 and lines[0] == "epsilon,adv_accuracy" and len(lines) == 3
    assert float(lines[2].split(",")[1]) < float(lines[1].split(",")[1])


def test_corrupt_checkpoint_exit_2(capsys, tmp_path, configs, mnist_dir):
    bad = tmp_path / "bad.dlck"
    bad.write_bytes(b"NOPE" + bytes(20))
    code, _, err = run(capsys, "eval", "--config", configs / "shallow.cfg", "--data-dir", mnist_dir,
                       "--checkpoint-in", bad)
    assert code == 2 and "DLCK" in err


def test_inspect_data(capsys, mnist_dir):
    code, out, _ = run(capsys, "inspect-data", "--data-dir", mnist_dir)
    assert code == 0 and "(60000, 28, 28, 1)" in out and "(10000, 28, 28, 1)" in out
