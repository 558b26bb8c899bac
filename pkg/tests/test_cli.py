import io

import click
import pandas as pd
import pytest

from forceadapt.main import cli_main

TINY_CONFIG = """
[train]
num_envs = 2
rollout_steps = 4
total_steps = 8
hidden = [8]
epochs = 1
minibatches = 1

[env]
episode_length_s = 0.5

[curriculum]
window = 2

[eval]
episodes = 1
episode_length_s = 0.2
num_envs = 1
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


def test_model_info(capsys):
    assert cli_main(["model-info", "mini-humanoid"]) == 0
    out = capsys.readouterr().out
    assert "mini-humanoid" in out


def test_envelope_to_stdout(capsys):
    assert cli_main(["envelope", "toy-arm", "--poses", "10"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# forceadapt-report format=1")
    frame = pd.read_csv(io.StringIO(out), comment="#")
    assert len(frame) == 10 * 1 * 3


def test_envelope_to_file(tmp_path):
    out = tmp_path / "env.csv"
    assert cli_main(["envelope", "mini-humanoid", "--poses", "5", "--clip", "wide", "--out", str(out)]) == 0
    assert len(pd.read_csv(out, comment="#")) == 5 * 2 * 3


def test_unknown_subcommand_is_usage_error():
    assert cli_main(["fly"]) == 1


def test_unknown_config_key_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[train]\nlearning_rat = 0.1\n", encoding="utf-8")
    assert cli_main(["train", str(path), "--out", str(tmp_path / "run")]) == 1
    assert "train.learning_rat" in capsys.readouterr().err


def test_missing_checkpoint_exits_2(tmp_path):
    assert cli_main(["eval", str(tmp_path / "absent.ckpt")]) == 2


def test_bad_levels_exit_1(tmp_path):
    assert cli_main(["sweep", str(tmp_path), "--levels", "0,2"]) == 1


def test_train_eval_and_curves(config_file, tmp_path):
    runs = tmp_path / "runs"
    run = runs / "falcon" / "seed_5"
    assert cli_main(["train", str(config_file), "--variant", "falcon", "--seed", "5", "--out", str(run), "--updates", "1"]) == 0
    assert (run / "final.ckpt").exists()
    assert (run / "config.toml").exists()

    report = tmp_path / "eval.csv"
    assert cli_main(["eval", str(run / "final.ckpt"), "--alpha", "0", "--alpha", "1", "--episodes", "1", "--out", str(report)]) == 0
    frame = pd.read_csv(report, comment="#")
    assert list(frame["level"]) == [0.0, 1.0]
    assert (frame["train_seed"] == 5).all()

    assert cli_main(["sweep", str(runs), "--levels", "0", "--episodes", "1"]) == 0
    sweep = pd.read_csv(runs / "sweep.csv", comment="#")
    assert (sweep["status"] == "ok").sum() == 1
    assert (sweep["status"] == "absent").sum() == 9

    assert cli_main(["plot-data", str(runs)]) == 0
    assert (runs / "curves_alpha.csv").exists()


def test_plot_data_without_logs_exits_1(tmp_path):
    assert cli_main(["plot-data", str(tmp_path)]) == 1


def test_unwritable_output_exits_2(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory", encoding="utf-8")
    assert cli_main(["envelope", "mini-humanoid", "--poses", "2", "--out", str(blocker / "envelope.csv")]) == 2
    assert "i/o error" in capsys.readouterr().err


def test_click_runtime_error_exits_2(monkeypatch):
    def locked(*args, **kwargs):
        raise click.FileError("envelope.csv", hint="locked")

    monkeypatch.setattr("forceadapt.main.envelope_report", locked)
    assert cli_main(["envelope", "mini-humanoid", "--poses", "2"]) == 2
