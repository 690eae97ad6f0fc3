"""
Forecast pipeline

Composes data loading, training, checkpointing, evaluation, prediction
and backtesting for one run directory. Every artifact lands under
config.output_dir with a stable file name.
"""

import logging
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .checkpoint import load_checkpoint, restore_params, save_checkpoint, write_history_csv
from .config import RunConfig, save_config
from .data import Dataset, Normalizer, WindowSample, fit_normalizer, load_csv, make_windows, split
from .errors import CheckpointMismatch, ConfigError, SegmentTooShort
from .metrics import METRIC_COLUMNS, MetricReport, evaluate
from .model import CryptoMamba, count_parameters, predict_next_close
from .trading import BacktestResult, backtest, write_summary_csv, write_trace_csv
from .training import EpochRecord, TrainResult, train

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
PREDICTORS = ("model", "persistence")

CHECKPOINT_FILE = "model.ckpt"
HISTORY_FILE = "history.csv"
CONFIG_ECHO_FILE = "config.yaml"
REPORT_FILE = "report.json"

# Model settings that only change how the forward pass is evaluated.
EXECUTION_ONLY_KEYS = ("fused_scan",)


def metrics_file(split_name: str) -> str:
    return f"metrics_{split_name}.csv"


def trace_file(split_name: str, strategy: str) -> str:
    return f"backtest_{split_name}_{strategy}.csv"


def summary_file(split_name: str) -> str:
    return f"backtest_{split_name}_summary.csv"


@dataclass
class TrainOutcome:
    result: TrainResult
    parameter_count: int
    checkpoint_path: Path


@dataclass
class SplitPredictions:
    """USD forecasts for every window of a split, in date order"""

    dates: List[date]
    actual: np.ndarray
    anchor: np.ndarray
    predicted: np.ndarray


class ForecastPipeline:
    """CryptoMamba run: train, evaluate, predict, backtest"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self._dataset: Optional[Dataset] = None
        self._segments: Optional[Dict[str, Dataset]] = None

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / CHECKPOINT_FILE

    # Data
    def load_dataset(self) -> Dataset:
        if self._dataset is None:
            path = Path(self.config.data_path)
            if not path.exists():
                raise ConfigError(f"data file not found: {path}")
            self._dataset = load_csv(path)
        return self._dataset

    def segments(self) -> Dict[str, Dataset]:
        if self._segments is None:
            self._segments = dict(zip(SPLITS, split(self.load_dataset(), self.config.split)))
        return self._segments

    def segment(self, split_name: str) -> Dataset:
        if split_name not in SPLITS:
            raise ConfigError(f"unknown split '{split_name}', expected one of {SPLITS}")
        return self.segments()[split_name]

    def fit_normalizer(self) -> Normalizer:
        return fit_normalizer(self.segment("train"), self.config.model.use_volume)

    def windows(self, split_name: str, normalizer: Normalizer) -> List[WindowSample]:
        model = self.config.model
        return make_windows(self.segment(split_name), model.lookback, model.use_volume, normalizer)

    # Model
    def build_model(self) -> CryptoMamba:
        return CryptoMamba(self.config.model, seed=self.config.train.seed)

    def train(self, on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainOutcome:
        normalizer = self.fit_normalizer()
        train_windows = self.windows("train", normalizer)
        val_windows = self.windows("val", normalizer)
        model = self.build_model()
        parameter_count = count_parameters(model)
        logger.info(f"Training on {len(train_windows)} windows, validating on {len(val_windows)}; "
                    f"{parameter_count} parameters")

        result = train(model, train_windows, val_windows, self.config.train, on_epoch)

        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = save_checkpoint(
            self.checkpoint_path,
            result.best_params,
            config=self.config.canonical(),
            config_hash=self.config.config_hash(),
            normalizer=normalizer.to_dict(),
            val_rmse=result.best_val_rmse,
            best_epoch=result.best_epoch,
        )
        write_history_csv(result.history, self.output_dir / HISTORY_FILE)
        save_config(self.config, self.output_dir / CONFIG_ECHO_FILE)
        return TrainOutcome(result, parameter_count, path)

    def load_model(self) -> Tuple[CryptoMamba, Normalizer]:
        checkpoint = load_checkpoint(self.checkpoint_path)
        if checkpoint.normalizer is None:
            raise CheckpointMismatch("checkpoint carries no normalizer")
        normalizer = Normalizer.from_dict(checkpoint.normalizer)
        if normalizer.use_volume != self.config.model.use_volume:
            raise CheckpointMismatch(
                f"checkpoint was trained with use_volume={normalizer.use_volume}, "
                f"config asks for use_volume={self.config.model.use_volume}"
            )
        saved = dict(checkpoint.config.get("model", {}))
        current = self.config.model.model_dump(mode="json")
        for key in EXECUTION_ONLY_KEYS:
            saved.pop(key, None)
            current.pop(key, None)
        if saved and saved != current:
            changed = sorted(k for k in current if saved.get(k) != current[k])
            raise CheckpointMismatch(f"model settings differ from the checkpoint: {changed}")

        model = self.build_model()
        restore_params(model.params, checkpoint)
        return model, normalizer

    # Inference
    def predict_split(self, split_name: str, model: CryptoMamba, normalizer: Normalizer) -> SplitPredictions:
        windows = self.windows(split_name, normalizer)
        inputs = np.stack([w.inputs for w in windows])
        predicted = normalizer.invert_target(model.predict(inputs))
        return SplitPredictions(
            dates=[w.target_date for w in windows],
            actual=np.array([w.target_close for w in windows]),
            anchor=np.array([w.anchor_close for w in windows]),
            predicted=np.asarray(predicted, dtype=np.float64),
        )

    def evaluate(self, split_name: str) -> Dict[str, MetricReport]:
        """Metrics of the trained model and of the persistence baseline on one split"""
        model, normalizer = self.load_model()
        preds = self.predict_split(split_name, model, normalizer)
        reports = {
            "cryptomamba": evaluate(preds.actual, preds.predicted),
            "persistence": evaluate(preds.actual, preds.anchor),
        }
        rows = [{"model": name, **report.to_row(split_name)} for name, report in reports.items()]
        path = self.output_dir / metrics_file(split_name)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=["model"] + METRIC_COLUMNS).to_csv(
            path, index=False, lineterminator="\n", float_format=lambda v: repr(float(v)))
        return reports

    def predict(self, as_of: Optional[date] = None) -> Tuple[date, float]:
        """Next-day close from the `lookback` bars ending at as_of (default: the last bar)"""
        model, normalizer = self.load_model()
        dataset = self.load_dataset()
        history = dataset.up_to(as_of) if as_of else dataset
        lookback = self.config.model.lookback
        if len(history) < lookback:
            raise SegmentTooShort(f"only {len(history)} bars up to {as_of}, need {lookback}")
        bars = history.tail(lookback)
        target_date = date.fromordinal(bars.end.toordinal() + 1)
        return target_date, predict_next_close(model, bars, normalizer)

    # Trading
    def backtest(self, split_name: str, predictor: str = "model") -> List[BacktestResult]:
        """
        Run every configured strategy over one split.

        Trading starts on the day before the first forecast target, the
        first day with a full input window inside the split, and the last
        day of the split is only valued.
        """
        if predictor not in PREDICTORS:
            raise ConfigError(f"unknown predictor '{predictor}', expected one of {PREDICTORS}")
        segment = self.segment(split_name)
        lookback = self.config.model.lookback
        if len(segment) <= lookback:
            raise SegmentTooShort(f"{split_name} split has {len(segment)} bars, needs more than {lookback}")
        closes = segment.closes[lookback - 1:]
        dates = segment.dates[lookback - 1:]
        if predictor == "model":
            model, normalizer = self.load_model()
            predictions = self.predict_split(split_name, model, normalizer).predicted
        else:
            predictions = closes[:-1].copy()

        cfg = self.config.backtest
        results = [backtest(closes, predictions, name, cfg, dates) for name in cfg.strategies]
        tag = split_name if predictor == "model" else f"{split_name}_{predictor}"
        for result in results:
            write_trace_csv(result, self.output_dir / trace_file(tag, result.strategy))
        write_summary_csv(results, self.output_dir / summary_file(tag))
        return results


def create_pipeline(config: RunConfig) -> ForecastPipeline:
    return ForecastPipeline(config)
