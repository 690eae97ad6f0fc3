import json

import pytest
import yaml
from pydantic import ValidationError

from crypto_mamba.errors import ArtifactError, MissingArtifact
from crypto_mamba.pipeline import CONFIG_ECHO_FILE, REPORT_FILE, create_pipeline
from crypto_mamba.report import SCHEMA_VERSION, BacktestRow, ReportBundle, collect, write_report


@pytest.fixture
def finished_run(run_config):
    pipeline = create_pipeline(run_config)
    outcome = pipeline.train()
    pipeline.evaluate("test")
    pipeline.backtest("test")
    pipeline.backtest("test", predictor="persistence")
    return pipeline, outcome


def test_bundle_echoes_run(finished_run):
    pipeline, outcome = finished_run
    bundle = collect(pipeline.output_dir)
    assert bundle.schema_version == SCHEMA_VERSION
    assert bundle.config == pipeline.config.canonical()
    assert bundle.config_hash == pipeline.config.config_hash()
    assert bundle.seed == pipeline.config.train.seed
    assert bundle.parameter_count == outcome.parameter_count
    assert bundle.history.epochs == len(outcome.result.history)
    assert bundle.history.best_epoch == outcome.result.best_epoch
    assert bundle.history.best_val_rmse == outcome.result.best_val_rmse
    assert [row.model for row in bundle.metrics["test"]] == ["cryptomamba", "persistence"]
    assert set(bundle.backtests) == {"test", "test_persistence"}
    assert [row.strategy for row in bundle.backtests["test"]] == ["vanilla", "smart", "extended_smart"]


def test_report_regeneration_is_byte_identical(finished_run):
    pipeline, _ = finished_run
    path = write_report(pipeline.output_dir)
    first = path.read_bytes()
    assert write_report(pipeline.output_dir).read_bytes() == first
    assert path.name == REPORT_FILE


def test_report_json_validates_against_schema(finished_run):
    pipeline, _ = finished_run
    data = json.loads(write_report(pipeline.output_dir).read_text())
    again = ReportBundle.model_validate(data)
    assert again.to_json() == (pipeline.output_dir / REPORT_FILE).read_text()


def test_missing_artifacts(tmp_path):
    with pytest.raises(MissingArtifact):
        collect(tmp_path)


def test_corrupt_config_echo(finished_run):
    pipeline, _ = finished_run
    (pipeline.output_dir / CONFIG_ECHO_FILE).write_text(yaml.safe_dump([1, 2]))
    with pytest.raises(ArtifactError):
        collect(pipeline.output_dir)


def test_backtest_row_bounds():
    with pytest.raises(ValidationError):
        BacktestRow(strategy="smart", final_balance=1.0, mdd_percent=120.0, trades=0,
                    nonpositive_networth=False)
