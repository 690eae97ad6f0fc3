"""
OHLCV data pipeline

Parses daily OHLCV CSV exports, splits them by date into half-open
train/validation/test segments, fits a z-score normalizer on the training
segment and cuts lookback windows whose inputs never leave their segment.
"""

import io
import logging
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import (
    ConfigError,
    DataError,
    DegenerateFeature,
    EmptyInput,
    InsufficientCoverage,
    MalformedRow,
    MissingDay,
    NonMonotonicDates,
    SegmentTooShort,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["Date", "Open", "High", "Low", "Close", "Volume"]
NUMERIC_COLUMNS = CSV_COLUMNS[1:]
FEATURES = ("open", "high", "low", "close", "volume")
DEFAULT_LOOKBACK = 14

# First data row of a CSV file; the header is row 1.
FIRST_DATA_ROW = 2


class OhlcvBar(BaseModel):
    """One daily bar of market data"""

    model_config = ConfigDict(frozen=True)

    timestamp: date
    open: float
    high: float
    low: float
    close: float
    volume: float

    @model_validator(mode="after")
    def _check_ranges(self) -> "OhlcvBar":
        reason = _bar_violation(self.open, self.high, self.low, self.close, self.volume)
        if reason:
            raise ValueError(reason)
        return self


def _bar_violation(open_, high, low, close, volume) -> Optional[str]:
    prices = (open_, high, low, close)
    if not all(math.isfinite(p) for p in prices) or not math.isfinite(volume):
        return "non-finite value"
    if min(prices) <= 0:
        return "price must be positive"
    if low > high:
        return "low above high"
    if low > min(open_, close):
        return "low above open/close"
    if high < max(open_, close):
        return "high below open/close"
    if volume < 0:
        return "negative volume"
    return None


class Dataset:
    """
    Ordered, gap-free daily OHLCV series.

    Backed by a DataFrame indexed by date with float columns
    open, high, low, close, volume.
    """

    def __init__(self, frame: pd.DataFrame):
        self.frame = frame

    @classmethod
    def from_bars(cls, bars: Sequence[OhlcvBar]) -> "Dataset":
        if not bars:
            raise EmptyInput("no bars")
        frame = pd.DataFrame(
            {name: [float(getattr(bar, name)) for bar in bars] for name in FEATURES},
            index=pd.DatetimeIndex([pd.Timestamp(bar.timestamp) for bar in bars], name="date"),
        )
        _check_calendar(frame.index)
        return cls(frame)

    def __len__(self) -> int:
        return len(self.frame)

    def __repr__(self) -> str:
        if not len(self):
            return "Dataset(empty)"
        return f"Dataset({len(self)} bars, {self.start} .. {self.end})"

    @property
    def start(self) -> date:
        return self.frame.index[0].date()

    @property
    def end(self) -> date:
        return self.frame.index[-1].date()

    @property
    def dates(self) -> List[date]:
        return [ts.date() for ts in self.frame.index]

    @property
    def closes(self) -> np.ndarray:
        return self.frame["close"].to_numpy(dtype=np.float64)

    @property
    def bars(self) -> List[OhlcvBar]:
        return [
            OhlcvBar(timestamp=ts.date(), open=row.open, high=row.high, low=row.low,
                     close=row.close, volume=row.volume)
            for ts, row in zip(self.frame.index, self.frame.itertuples(index=False))
        ]

    def feature_names(self, use_volume: bool) -> Tuple[str, ...]:
        return FEATURES if use_volume else FEATURES[:4]

    def feature_matrix(self, use_volume: bool) -> np.ndarray:
        return self.frame[list(self.feature_names(use_volume))].to_numpy(dtype=np.float64)

    def between(self, start: date, end: date) -> "Dataset":
        """Bars with start <= date < end"""
        index = self.frame.index
        mask = (index >= pd.Timestamp(start)) & (index < pd.Timestamp(end))
        return Dataset(self.frame.loc[mask])

    def up_to(self, as_of: date) -> "Dataset":
        """Bars dated on or before as_of"""
        return Dataset(self.frame.loc[self.frame.index <= pd.Timestamp(as_of)])

    def tail(self, count: int) -> "Dataset":
        return Dataset(self.frame.iloc[-count:])


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        return math.nan


def _check_calendar(index: pd.DatetimeIndex) -> None:
    if len(index) < 2:
        return
    steps = np.diff(index.values).astype("timedelta64[D]").astype(np.int64)
    backwards = np.flatnonzero(steps <= 0)
    if backwards.size:
        i = int(backwards[0]) + 1
        raise NonMonotonicDates(i + FIRST_DATA_ROW, index[i - 1].date(), index[i].date())
    gaps = np.flatnonzero(steps > 1)
    if gaps.size:
        i = int(gaps[0]) + 1
        raise MissingDay(i + FIRST_DATA_ROW, index[i - 1].date() + timedelta(days=1))


def parse_csv(text: str) -> Dataset:
    """
    Parse a Yahoo Finance style daily export.

    Args:
        text: CSV text with header Date,Open,High,Low,Close,Volume
              (an Adj Close column is ignored)

    Returns:
        Dataset in file order, validated bar by bar
    """
    if not text or not text.strip():
        raise EmptyInput("input is empty")

    try:
        raw = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False,
                          skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise EmptyInput("input is empty")
    except pd.errors.ParserError as e:
        raise MalformedRow(FIRST_DATA_ROW, f"unreadable CSV: {e}")

    raw.columns = [str(c).strip() for c in raw.columns]
    missing = [c for c in CSV_COLUMNS if c not in raw.columns]
    if missing:
        raise MalformedRow(1, f"header lacks columns {missing}")
    if raw.empty:
        raise EmptyInput("header without data rows")

    dates = pd.to_datetime(raw["Date"].str.strip(), format="%Y-%m-%d", errors="coerce")
    values = pd.DataFrame({c.lower(): raw[c].map(_parse_float) for c in NUMERIC_COLUMNS})

    unparseable = dates.isna() | values.isna().any(axis=1)
    if unparseable.any():
        i = int(np.flatnonzero(unparseable.to_numpy())[0])
        raise MalformedRow(i + FIRST_DATA_ROW, "unparseable field")

    for i, row in enumerate(values.itertuples(index=False)):
        reason = _bar_violation(row.open, row.high, row.low, row.close, row.volume)
        if reason:
            raise MalformedRow(i + FIRST_DATA_ROW, reason)

    values.index = pd.DatetimeIndex(dates, name="date")
    _check_calendar(values.index)

    dataset = Dataset(values[list(FEATURES)])
    logger.info(f"Parsed {len(dataset)} bars, {dataset.start} .. {dataset.end}")
    return dataset


def load_csv(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"{path} is not UTF-8 text (byte offset {e.start})")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror or e}")
    return parse_csv(text)


def serialize_csv(dataset: Dataset) -> str:
    """Write a dataset in the format parse_csv reads"""
    out = dataset.frame.rename(columns={name: name.capitalize() for name in FEATURES})
    out.insert(0, "Date", [d.isoformat() for d in dataset.dates])
    return out.to_csv(index=False, lineterminator="\n",
                      float_format=lambda v: repr(float(v)))


class SplitSpec(BaseModel):
    """Half-open date intervals [train_start, train_end), [train_end, val_end), [val_end, test_end)"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    train_start: date = date(2018, 9, 17)
    train_end: date = date(2022, 9, 17)
    val_end: date = date(2023, 9, 17)
    test_end: date = date(2024, 9, 17)


def split(dataset: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    if not (spec.train_start < spec.train_end < spec.val_end < spec.test_end):
        raise InsufficientCoverage(
            f"split boundaries must increase strictly: {spec.train_start}, "
            f"{spec.train_end}, {spec.val_end}, {spec.test_end}"
        )
    if not len(dataset):
        raise InsufficientCoverage("dataset is empty")
    last_needed = spec.test_end - timedelta(days=1)
    if dataset.start > spec.train_start or dataset.end < last_needed:
        raise InsufficientCoverage(
            f"dataset covers {dataset.start} .. {dataset.end}, "
            f"split needs {spec.train_start} .. {last_needed}"
        )

    train = dataset.between(spec.train_start, spec.train_end)
    val = dataset.between(spec.train_end, spec.val_end)
    test = dataset.between(spec.val_end, spec.test_end)
    logger.info(f"Split sizes: train={len(train)} val={len(val)} test={len(test)}")
    return train, val, test


@dataclass(frozen=True)
class Normalizer:
    """Per-feature z-score parameters; the target shares the close column's"""

    features: Tuple[str, ...]
    shift: np.ndarray
    scale: np.ndarray

    @property
    def use_volume(self) -> bool:
        return "volume" in self.features

    @property
    def target_shift(self) -> float:
        return float(self.shift[self.features.index("close")])

    @property
    def target_scale(self) -> float:
        return float(self.scale[self.features.index("close")])

    def apply_features(self, matrix: np.ndarray) -> np.ndarray:
        return (matrix - self.shift) / self.scale

    def apply_target(self, value):
        return (value - self.target_shift) / self.target_scale

    def invert_target(self, value):
        return value * self.target_scale + self.target_shift

    def to_dict(self) -> Dict[str, Any]:
        return {
            "features": list(self.features),
            "shift": [float(v) for v in self.shift],
            "scale": [float(v) for v in self.scale],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Normalizer":
        return cls(
            features=tuple(data["features"]),
            shift=np.asarray(data["shift"], dtype=np.float64),
            scale=np.asarray(data["scale"], dtype=np.float64),
        )


def fit_normalizer(train_segment: Dataset, use_volume: bool) -> Normalizer:
    if not len(train_segment):
        raise EmptyInput("cannot fit a normalizer on an empty segment")
    features = train_segment.feature_names(use_volume)
    matrix = train_segment.feature_matrix(use_volume)
    for j, name in enumerate(features):
        if np.ptp(matrix[:, j]) == 0:
            raise DegenerateFeature(name)
    return Normalizer(features=features, shift=matrix.mean(axis=0), scale=matrix.std(axis=0))


@dataclass(frozen=True, eq=False)
class WindowSample:
    """
    Lookback window and its next-day target.

    anchor_close is the raw close of the last input day (today's price for
    trading); target_close is the raw close being predicted.
    """

    inputs: np.ndarray
    target: float
    target_date: date
    anchor_close: float = field(default=math.nan)
    target_close: float = field(default=math.nan)


def make_windows(segment: Dataset, lookback: int, use_volume: bool,
                 normalizer: Normalizer) -> List[WindowSample]:
    if lookback < 1:
        raise ConfigError(f"lookback must be positive, got {lookback}")
    if len(segment) <= lookback:
        raise SegmentTooShort(
            f"segment of {len(segment)} bars has no target day with a full {lookback}-day window"
        )
    if normalizer.use_volume != use_volume:
        raise ConfigError(
            f"normalizer was fitted with use_volume={normalizer.use_volume}, windows requested "
            f"with use_volume={use_volume}"
        )

    features = normalizer.apply_features(segment.feature_matrix(use_volume))
    closes = segment.closes
    targets = normalizer.apply_target(closes)
    dates = segment.dates
    return [
        WindowSample(
            inputs=features[t - lookback:t].copy(),
            target=float(targets[t]),
            target_date=dates[t],
            anchor_close=float(closes[t - 1]),
            target_close=float(closes[t]),
        )
        for t in range(lookback, len(segment))
    ]


def stack_windows(windows: Sequence[WindowSample]) -> Tuple[np.ndarray, np.ndarray]:
    """Batch arrays (count, lookback, features) and (count,)"""
    inputs = np.stack([w.inputs for w in windows])
    targets = np.array([w.target for w in windows], dtype=np.float64)
    return inputs, targets
