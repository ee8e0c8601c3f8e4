import subprocess
import sys

import pytest

from metaaug import checkpoint
from metaaug.cli import main
from metaaug.data import load_dataset

SMALL = ["--set", "synth_n=80", "--set", "hidden=16,8", "--set", "policy_hidden=8",
         "--set", "T=6", "--set", "n_tr=8", "--set", "n_val=8"]


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("dataset = synth\nseed = 3\n")
    return path


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "export-dist" in capsys.readouterr().out


def test_console_script_is_installed():
    out = subprocess.run([sys.executable, "-m", "metaaug.cli", "gradcheck", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "--eps" in out.stdout


def test_usage_errors_exit_two(tmp_path, conf, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.conf")]) == 2
    assert main(["train", "--bogus"]) == 2
    assert main(["train", "--config", str(conf), "--set", "T=zero"]) == 2
    assert "config error" in capsys.readouterr().err


def test_train_writes_all_outputs(tmp_path, conf):
    log, ck, dist = tmp_path / "log.csv", tmp_path / "p.ckpt", tmp_path / "dist.csv"
    rc = main(["train", "--config", str(conf), *SMALL, "--log", str(log), "--checkpoint", str(ck),
               "--dist", str(dist)])
    assert rc == 0
    lines = log.read_text().strip().split("\n")
    assert len(lines) == 7
    assert checkpoint.load_checkpoint(ck).p.shape == (14, 14)
    assert len(dist.read_text().strip().split("\n")) == 15

    out = tmp_path / "exported.csv"
    assert main(["export-dist", str(ck), "-o", str(out)]) == 0
    assert out.read_text() == dist.read_text()

    tlog = tmp_path / "transfer.csv"
    assert main(["transfer", "--policy", str(ck), "--config", str(conf), *SMALL, "--log", str(tlog)]) == 0
    assert len(tlog.read_text().strip().split("\n")) == 7


def test_transfer_rejects_other_catalog(tmp_path, conf, capsys):
    ck = tmp_path / "p.ckpt"
    assert main(["train", "--config", str(conf), *SMALL, "--checkpoint", str(ck)]) == 0
    rc = main(["transfer", "--policy", str(ck), "--config", str(conf), *SMALL, "--set", "rotate_max_deg=90"])
    assert rc == 1
    assert "catalog" in capsys.readouterr().err


def test_export_dist_bad_file(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["export-dist", str(bad)]) == 1


def test_synth_and_convert(tmp_path):
    out = tmp_path / "glyphs.maug"
    assert main(["synth", str(out), "--n", "16", "--seed", "2"]) == 0
    assert len(load_dataset(out)) == 16
    src = tmp_path / "tree" / "a"
    src.mkdir(parents=True)
    (src / "x.pgm").write_bytes(b"P5 2 2 255\n" + bytes([0, 64, 128, 255]))
    assert main(["convert", str(tmp_path / "tree"), str(tmp_path / "t.maug")]) == 0
    back = load_dataset(tmp_path / "t.maug")
    assert back.num_classes == 1 and back.images.shape == (1, 2, 2, 1)


def test_gradcheck_few_trials(capsys):
    assert main(["gradcheck", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and len(out.strip().split("\n")) == 5
    assert main(["gradcheck", "--trials", "2", "--tol", "1e-30"]) == 1
