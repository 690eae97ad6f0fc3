"""
Run report

Collects the artifacts of a run directory (config echo, checkpoint header,
training history, metrics and backtest summaries) into one JSON bundle.
The bundle holds no timestamps, so regenerating it from the same
artifacts gives the same bytes.
"""

import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field

from .checkpoint import load_checkpoint, read_history_csv
from .errors import ArtifactError, MissingArtifact
from .pipeline import CHECKPOINT_FILE, CONFIG_ECHO_FILE, HISTORY_FILE, REPORT_FILE

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_METRICS_PATTERN = re.compile(r"^metrics_(?P<split>\w+)\.csv$")
_SUMMARY_PATTERN = re.compile(r"^backtest_(?P<split>\w+)_summary\.csv$")


class MetricRow(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    model: str
    split: str
    rmse: float = Field(ge=0)
    mape: float = Field(ge=0)
    mae: float = Field(ge=0)
    n: int = Field(ge=1)


class BacktestRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategy: str
    final_balance: float
    mdd_percent: float = Field(ge=0, le=100)
    trades: int = Field(ge=0)
    nonpositive_networth: bool


class HistorySummary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(ge=0)
    best_epoch: int = Field(ge=0)
    best_val_rmse: Optional[float] = None
    final_lr: Optional[float] = None


class ReportBundle(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    config: Dict[str, Any]
    config_hash: str
    seed: int
    parameter_count: int
    history: HistorySummary
    metrics: Dict[str, List[MetricRow]] = Field(default_factory=dict)
    backtests: Dict[str, List[BacktestRow]] = Field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(str(path), hint)
    return path


def _read_rows(path: Path) -> List[Dict[str, Any]]:
    frame = pd.read_csv(path, float_precision="round_trip")
    return frame.to_dict(orient="records")


def collect(output_dir: Union[str, Path]) -> ReportBundle:
    output_dir = Path(output_dir)
    config_path = _require(output_dir / CONFIG_ECHO_FILE, "run the train command first")
    config = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    if not isinstance(config, dict):
        raise ArtifactError(f"{config_path} does not hold a config mapping")

    checkpoint = load_checkpoint(_require(output_dir / CHECKPOINT_FILE, "run the train command first"))
    history = read_history_csv(_require(output_dir / HISTORY_FILE, "run the train command first"))
    summary = HistorySummary(
        epochs=len(history),
        best_epoch=int(checkpoint.header.get("best_epoch", 0)),
        best_val_rmse=checkpoint.val_rmse,
        final_lr=float(history["lr"].iloc[-1]) if len(history) else None,
    )

    metrics: Dict[str, List[MetricRow]] = {}
    backtests: Dict[str, List[BacktestRow]] = {}
    for path in sorted(output_dir.iterdir()):
        if match := _METRICS_PATTERN.match(path.name):
            metrics[match["split"]] = [MetricRow(**row) for row in _read_rows(path)]
        elif match := _SUMMARY_PATTERN.match(path.name):
            backtests[match["split"]] = [BacktestRow(**row) for row in _read_rows(path)]

    return ReportBundle(
        config=config,
        config_hash=checkpoint.header.get("config_hash", ""),
        seed=int(config.get("train", {}).get("seed", 0)),
        parameter_count=int(checkpoint.header.get("parameter_count", 0)),
        history=summary,
        metrics=metrics,
        backtests=backtests,
    )


def write_report(output_dir: Union[str, Path]) -> Path:
    bundle = collect(output_dir)
    path = Path(output_dir) / REPORT_FILE
    path.write_text(bundle.to_json(), encoding="utf-8")
    logger.info(f"Wrote report {path}: {len(bundle.metrics)} metric splits, "
                f"{len(bundle.backtests)} backtest splits")
    return path
