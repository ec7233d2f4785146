import filecmp
import subprocess
import sys

import pytest

from depthadapt.cli import main
from depthadapt.config import KEYS, RunConfig
from depthadapt.exceptions import ConfigurationError

SMALL = ["data.height=32", "data.width=48", "model.depth=2", "model.base_channels=4"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("DEPTHADAPT_RUNS_DIR", str(tmp_path / "runs"))
    return tmp_path


def gen(root, seed=7):
    return main(["gen-data", "--root", str(root), "--seed", str(seed), "data.n_source=8", "data.n_target=8",
                 "data.n_test=4", "data.height=32", "data.width=48"])


def dir_trees_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(dir_trees_equal(a / d, b / d) for d in cmp.common_dirs)


def test_gen_data_deterministic(workdir):
    assert gen(workdir / "a") == 0
    assert gen(workdir / "b") == 0
    assert dir_trees_equal(workdir / "a", workdir / "b")
    assert gen(workdir / "c", seed=8) == 0
    assert not dir_trees_equal(workdir / "a", workdir / "c")


@pytest.fixture
def trained(workdir):
    assert gen(workdir / "d") == 0
    assert main(["pretrain", "data.root=d", *SMALL, "train.pretrain_epochs=1", "--name", "pre"]) == 0
    assert main(["adapt", "data.root=d", *SMALL, "train.adapt_epochs=1", "batch.N=12",
                 "--name", "ada", "--init", "runs/pre/ckpt-0001"]) == 0
    return workdir


def test_training_artifacts(trained, capsys):
    runs = trained / "runs"
    assert (runs / "pre" / "ckpt-0001" / "model.pt").exists()
    assert (runs / "ada" / "config.txt").exists()
    lines = (runs / "ada" / "log.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert header[:5] == ["step", "lr", "source_loss", "consistency_loss", "total"]
    assert lines[1].split("\t")[header.index("forward_batch")] == "42"


def test_evaluate_row(trained, capsys):
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", "runs/ada/ckpt-0001", "data.root=d", "--cap", "50", "--crop", "garg"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    values = [float(v) for v in out[0].split("\t")]
    assert len(values) == 7


def test_uncertainty_and_report(trained, capsys):
    capsys.readouterr()
    assert main(["uncertainty", "--checkpoint", "runs/pre/ckpt-0001", "data.root=d"]) == 0
    assert float(capsys.readouterr().out) > 0
    assert main(["report", "runs/pre", "runs/ada", "data.root=d", "--grid", "grid.png"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 3 and out[0].startswith("run\tabs_rel")
    assert (trained / "grid.png").exists()


def test_resume_continues_run(trained, capsys):
    args = ["pretrain", "data.root=d", *SMALL, "train.pretrain_epochs=2", "--name", "pre"]
    assert main(args) == 2                      # existing log without --resume
    assert "use --resume" in capsys.readouterr().err
    assert main(args + ["--resume"]) == 2       # config differs from the checkpointed one
    log = (trained / "runs" / "pre" / "log.tsv").read_text()
    # resuming a finished run is a no-op
    assert main(["pretrain", "data.root=d", *SMALL, "train.pretrain_epochs=1", "--name", "pre", "--resume"]) == 0
    assert (trained / "runs" / "pre" / "log.tsv").read_text() == log


def test_config_rejection_exit_codes(workdir, capsys):
    assert main(["evaluate", "--checkpoint", "x", "no.such_key=1"]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ConfigurationError:")
    assert main(["evaluate", "--checkpoint", "x", "loss.streams=7"]) == 2
    (workdir / "bad.cfg").write_text("aug.m = 7\nmystery = 1\n")
    assert main(["evaluate", "--checkpoint", "x", "--config", "bad.cfg"]) == 2


def test_runtime_failure_is_one_line_exit_1(workdir, capsys):
    assert main(["evaluate", "--checkpoint", "missing.pt"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")


def test_adapt_without_init_is_rejected(workdir, capsys):
    gen(workdir / "d")
    assert main(["adapt", "data.root=d", *SMALL]) == 2


def test_help_lists_every_key():
    out = subprocess.run([sys.executable, "-m", "depthadapt.cli", "--help"], capture_output=True, text=True).stdout
    for key in KEYS.values():
        line = next(ln for ln in out.splitlines() if ln.strip().startswith(key.name + " "))
        assert "default=" in line and f"[{key.owner}]" in line


def test_config_file_and_override_order(tmp_path):
    (tmp_path / "run.cfg").write_text("# comment\naug.m = 3\nbatch.r = 9/2\n")
    cfg = RunConfig.resolve(tmp_path / "run.cfg", ["aug.m=5"])
    assert cfg["aug.m"] == 5.0 and cfg["batch.r"] == "9/2"
    assert RunConfig.resolve(None, ["train.profile=paper-scale"])["train.adapt_lr"] == 4e-8
    with pytest.raises(ConfigurationError):
        RunConfig.resolve(None, ["aug.static_cutout=maybe"])
