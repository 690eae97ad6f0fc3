"""
Regression metrics in USD space and maximum drawdown.
"""

from typing import Dict, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, PositiveInt

from .errors import EmptySeries, LengthMismatch, NonPositiveValue, ZeroActual

METRIC_COLUMNS = ["split", "rmse", "mape", "mae", "n"]


class MetricReport(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    rmse: NonNegativeFloat
    mape: NonNegativeFloat
    mae: NonNegativeFloat
    n: PositiveInt

    def to_row(self, split: str) -> Dict[str, object]:
        return {"split": split, "rmse": self.rmse, "mape": self.mape, "mae": self.mae, "n": self.n}


def _pair(actual, predicted) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(actual, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if len(y) != len(y_hat):
        raise LengthMismatch(f"{len(y)} actual values vs {len(y_hat)} predictions")
    if not len(y):
        raise EmptySeries("metrics need at least one sample")
    return y, y_hat


def rmse(actual, predicted) -> float:
    y, y_hat = _pair(actual, predicted)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mape(actual, predicted) -> float:
    """Mean absolute percentage error, in percent"""
    y, y_hat = _pair(actual, predicted)
    zeros = np.flatnonzero(y == 0)
    if zeros.size:
        raise ZeroActual(int(zeros[0]))
    return float(100.0 * np.mean(np.abs((y - y_hat) / y)))


def mae(actual, predicted) -> float:
    y, y_hat = _pair(actual, predicted)
    return float(np.mean(np.abs(y - y_hat)))


def evaluate(actual, predicted) -> MetricReport:
    return MetricReport(
        rmse=rmse(actual, predicted),
        mape=mape(actual, predicted),
        mae=mae(actual, predicted),
        n=len(np.asarray(actual).reshape(-1)),
    )


def mdd(networth) -> float:
    """
    Largest peak-to-trough decline as a fraction of the running peak.

    Raises NonPositiveValue for series that touch zero or go negative,
    where the drawdown ratio is undefined.
    """
    values = np.asarray(networth, dtype=np.float64).reshape(-1)
    if not len(values):
        raise EmptySeries("drawdown of an empty series")
    bad = np.flatnonzero(~(values > 0))
    if bad.size:
        i = int(bad[0])
        raise NonPositiveValue(i, float(values[i]))
    peak = np.maximum.accumulate(values)
    return float(np.max((peak - values) / peak))
