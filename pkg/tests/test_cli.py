import json

import pytest

from crypto_mamba.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, build_parser, exit_code_for, main
from crypto_mamba.config import CONFIG_ENV, save_config
from crypto_mamba.data import serialize_csv
from crypto_mamba.errors import CheckpointMismatch, MissingDay, NonFiniteLoss
from crypto_mamba.model import CryptoMamba, count_parameters
from crypto_mamba.pipeline import CHECKPOINT_FILE, HISTORY_FILE, REPORT_FILE, metrics_file

from .conftest import synthetic_dataset


@pytest.fixture
def config_file(tmp_path, run_config):
    return str(save_config(run_config, tmp_path / "run.yaml"))


def _run(config_file, *args):
    command, *rest = args
    return main([command, "--config", config_file, *rest])


def test_ingest_valid_file(tmp_path, capsys):
    path = tmp_path / "btc.csv"
    path.write_text(serialize_csv(synthetic_dataset(10)), encoding="utf-8")
    assert main(["ingest", str(path)]) == EXIT_OK
    assert "10 bars" in capsys.readouterr().out


def test_ingest_reports_gap(tmp_path, capsys):
    lines = serialize_csv(synthetic_dataset(10)).splitlines()
    del lines[4]
    path = tmp_path / "gap.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    assert main(["ingest", str(path)]) == EXIT_DATA
    assert "MissingDay" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["", "Date,Open,High,Low,Close,Volume\n"])
def test_ingest_empty_file(tmp_path, text):
    path = tmp_path / "empty.csv"
    path.write_text(text, encoding="utf-8")
    assert main(["ingest", str(path)]) == EXIT_DATA


def test_ingest_missing_file(tmp_path):
    assert main(["ingest", str(tmp_path / "nope.csv")]) == EXIT_DATA


def test_ingest_undecodable_file(tmp_path, capsys):
    path = tmp_path / "latin.csv"
    path.write_bytes(serialize_csv(synthetic_dataset(5)).encode("utf-8") + b"2020-01-06,\xff\xfe,1,1,1,1\n")
    assert main(["ingest", str(path)]) == EXIT_DATA
    assert "UTF-8" in capsys.readouterr().err


def test_ingest_directory(tmp_path):
    assert main(["ingest", str(tmp_path)]) == EXIT_DATA


def test_exit_codes():
    assert exit_code_for(CheckpointMismatch("x")) == EXIT_CONFIG
    assert exit_code_for(MissingDay(3, synthetic_dataset(2).start)) == EXIT_DATA
    assert exit_code_for(NonFiniteLoss(1, 0, float("nan"))) == 4


def test_parser_collects_overrides():
    args = build_parser().parse_args(["train", "--set", "train.seed=1", "--set", "train.max_epochs=2"])
    assert args.overrides == ["train.seed=1", "train.max_epochs=2"]
    assert args.config is None


def test_bad_override_exits_with_config_code(config_file):
    assert _run(config_file, "train", "--set", "train.max_epochs=-1") == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == EXIT_CONFIG


def test_config_from_environment(monkeypatch, config_file, run_config, capsys):
    monkeypatch.setenv(CONFIG_ENV, config_file)
    assert main(["backtest", "--split", "test", "--predictor", "persistence"]) == EXIT_OK
    assert (run_config.output_dir / "backtest_test_persistence_summary.csv").exists()


def test_commands_before_training_fail(config_file):
    assert _run(config_file, "evaluate") != EXIT_OK
    assert _run(config_file, "predict") != EXIT_OK
    assert _run(config_file, "report") != EXIT_OK


def test_train_prints_parameter_count(config_file, run_config, capsys):
    assert _run(config_file, "train", "--set", "train.max_epochs=1") == EXIT_OK
    out = capsys.readouterr().out
    expected = count_parameters(CryptoMamba(run_config.model))
    assert f"Parameters: {expected}" in out
    assert "epoch    1  train " in out
    history = (run_config.output_dir / HISTORY_FILE).read_text().splitlines()
    assert len(history) == 2


def test_train_is_reproducible(config_file, run_config):
    ckpt = run_config.output_dir / CHECKPOINT_FILE
    assert _run(config_file, "train") == EXIT_OK
    first = ckpt.read_bytes()
    assert _run(config_file, "train") == EXIT_OK
    assert ckpt.read_bytes() == first


def test_full_run(config_file, run_config, capsys):
    out_dir = run_config.output_dir
    assert _run(config_file, "train") == EXIT_OK
    assert _run(config_file, "evaluate", "--split", "val") == EXIT_OK
    assert (out_dir / metrics_file("val")).exists()
    assert _run(config_file, "evaluate") == EXIT_OK
    assert "Reference test MAPE" in capsys.readouterr().out

    assert _run(config_file, "predict", "--as-of", "2020-05-01") == EXIT_OK
    assert "2020-05-02 close:" in capsys.readouterr().out

    assert _run(config_file, "backtest", "--split", "test") == EXIT_OK
    out = capsys.readouterr().out
    for strategy in ("vanilla", "smart", "extended_smart"):
        assert strategy in out

    assert _run(config_file, "report") == EXIT_OK
    bundle = json.loads((out_dir / REPORT_FILE).read_text())
    assert set(bundle["metrics"]) == {"test", "val"}
    assert set(bundle["backtests"]) == {"test"}


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["forecast"])
    assert exc.value.code == 2
