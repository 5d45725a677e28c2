"""CLI smoke tests to ensure entrypoints are wired and commands run end to end."""

import subprocess
import sys

import pytest
from typer.testing import CliRunner

from normlab.ui.cli import app

runner = CliRunner()

SMALL_CONFIG = """
[run]
epochs = 1
batch_size = 16
seed = 3

[data]
samples = 64
features = 4

[model]
layer.0.out_features = 6
layer.0.norm = l1
"""


def run_cmd(args: list[str]) -> subprocess.CompletedProcess:
    return subprocess.run(
        args,
        capture_output=True,
        text=True,
        timeout=30,
        check=False,
    )


@pytest.fixture(autouse=True)
def _isolated_cwd(tmp_path, monkeypatch):
    """Keep ./.normlab.json lookups and default outputs inside tmp_path."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("NORMLAB_SEED", raising=False)


def test_cli_main_help():
    cp = run_cmd([sys.executable, "-m", "normlab.ui.cli", "--help"])
    assert cp.returncode == 0
    assert "normlab CLI" in cp.stdout


def test_verify_constants_prints_header_and_row():
    result = runner.invoke(app, ["--log-level", "WARNING", "verify-constants", "--scheme", "l1", "--trials", "1000"])
    assert result.exit_code == 0, result.output
    lines = result.stdout.strip().splitlines()
    assert "scheme,n,k,closed_form,mc_value,mc_stderr" in lines
    row = next(line for line in lines if line.startswith("l1,256,,"))
    assert row.split(",")[3] == "1.253314"


def test_verify_constants_uses_settings_file(tmp_path):
    settings = tmp_path / "settings.json"
    settings.write_text('{"log_level": "WARNING", "mc_trials": 1000, "mc_seed": 5}')
    args = ["--settings", str(settings), "verify-constants", "--scheme", "linf", "--n", "16", "--no-header"]
    first = runner.invoke(app, args)
    assert first.exit_code == 0, first.output
    assert first.stdout.strip().startswith("linf,16,,")
    assert runner.invoke(app, args).stdout == first.stdout


def test_verify_constants_without_header():
    result = runner.invoke(
        app, ["--log-level", "WARNING", "verify-constants", "--scheme", "topk", "--n", "64", "--k", "10",
              "--trials", "1000", "--no-header"]
    )
    assert result.exit_code == 0, result.output
    assert "closed_form" not in result.stdout
    assert "topk,64,10," in result.stdout


def test_verify_constants_rejects_bad_k():
    result = runner.invoke(app, ["verify-constants", "--scheme", "topk", "--n", "8", "--k", "9", "--trials", "1000"])
    assert result.exit_code == 1
    assert "K_OUT_OF_RANGE" in result.output


def test_verify_constants_rejects_few_trials():
    result = runner.invoke(app, ["verify-constants", "--trials", "10"])
    assert result.exit_code == 1


def test_verify_claim():
    result = runner.invoke(app, ["--log-level", "WARNING", "verify-claim", "--eta", "0.001"])
    assert result.exit_code == 0, result.output
    assert "ratio_at_half_eta" in result.output


def test_train_writes_outputs(tmp_path):
    config = tmp_path / "small.ini"
    config.write_text(SMALL_CONFIG)
    out = tmp_path / "run.csv"
    result = runner.invoke(
        app,
        ["--log-level", "WARNING", "train", "--config", str(config), "--out", str(out),
         "--params", str(tmp_path / "p.npz"), "--trajectory", str(tmp_path / "t.csv")],
    )
    assert result.exit_code == 0, result.output
    assert out.read_text().splitlines()[0] == "epoch,train_loss,val_acc,mean_norm,max_norm,diverged"
    assert len(out.read_text().splitlines()) == 2
    assert (tmp_path / "p.npz").exists()
    assert (tmp_path / "t.csv").read_text().startswith("step,layer,channel,norm")


def test_train_bad_config(tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text("[run]\nepoch = 2\n")
    result = runner.invoke(app, ["train", "--config", str(config)])
    assert result.exit_code == 1
    assert "CONFIG_ERROR" in result.output


def test_train_missing_config(tmp_path):
    result = runner.invoke(app, ["train", "--config", str(tmp_path / "absent.ini")])
    assert result.exit_code == 1


def test_experiment_unknown_name(tmp_path):
    config = tmp_path / "small.ini"
    config.write_text(SMALL_CONFIG)
    result = runner.invoke(app, ["experiment", "resnet", "--config", str(config), "--out", str(tmp_path / "o")])
    assert result.exit_code == 2


def test_experiment_out_is_a_file(tmp_path):
    config = tmp_path / "small.ini"
    config.write_text(SMALL_CONFIG)
    target = tmp_path / "taken"
    target.write_text("x")
    result = runner.invoke(app, ["experiment", "claim", "--config", str(config), "--out", str(target)])
    assert result.exit_code == 2


def test_experiment_claim_writes_files(tmp_path):
    config = tmp_path / "small.ini"
    config.write_text(SMALL_CONFIG)
    out_dir = tmp_path / "claim"
    result = runner.invoke(
        app, ["--log-level", "WARNING", "experiment", "claim", "--config", str(config), "--out", str(out_dir)]
    )
    assert result.exit_code == 0, result.output
    assert (out_dir / "claim.csv").exists()
    assert (out_dir / "summary.csv").exists()
    assert (out_dir / "config.ini").exists()
