"""
crypto-mamba - selective state-space Bitcoin price forecaster with trading backtests
"""

__version__ = "1.0.0"
__author__ = "Organized-AI"
__license__ = "MIT"

from .config import RunConfig, load_config
from .data import Dataset, SplitSpec, load_csv, parse_csv
from .metrics import MetricReport, mae, mape, mdd, rmse
from .model import CryptoMamba, ModelConfig, count_parameters, predict_next_close
from .pipeline import ForecastPipeline, create_pipeline
from .trading import BacktestConfig, BacktestResult, backtest
from .training import TrainConfig, train

__all__ = [
    "BacktestConfig", "BacktestResult", "CryptoMamba", "Dataset", "ForecastPipeline",
    "MetricReport", "ModelConfig", "RunConfig", "SplitSpec", "TrainConfig",
    "backtest", "count_parameters", "create_pipeline", "load_config", "load_csv",
    "mae", "mape", "mdd", "parse_csv", "predict_next_close", "rmse", "train",
]
