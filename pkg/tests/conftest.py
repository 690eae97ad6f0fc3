"""Shared fixtures: synthetic OHLCV series and tiny model configurations."""

from datetime import date, timedelta

import numpy as np
import pytest

from crypto_mamba.config import RunConfig
from crypto_mamba.data import Dataset, OhlcvBar, SplitSpec
from crypto_mamba.model import ModelConfig
from crypto_mamba.training import SchedulerConfig, TrainConfig

START = date(2020, 1, 1)


def synthetic_closes(days: int, seed: int = 0, noise: float = 0.01, trend: float = 0.05) -> np.ndarray:
    """Noisy sine on an upward trend, strictly positive"""
    rng = np.random.default_rng(seed)
    t = np.arange(days, dtype=np.float64)
    base = 100.0 + trend * t + 10.0 * np.sin(2 * np.pi * t / 30.0)
    return base * (1.0 + noise * rng.standard_normal(days))


def synthetic_bars(days: int, seed: int = 0, start: date = START, noise: float = 0.01,
                   trend: float = 0.05):
    rng = np.random.default_rng(seed + 1)
    closes = synthetic_closes(days, seed, noise, trend)
    opens = np.concatenate([[closes[0]], closes[:-1]])
    bars = []
    for i in range(days):
        o, c = float(opens[i]), float(closes[i])
        high = max(o, c) * (1.0 + 0.005 * abs(rng.standard_normal()))
        low = min(o, c) * (1.0 - 0.005 * abs(rng.standard_normal()))
        volume = 1000.0 + 200.0 * rng.random()
        bars.append(OhlcvBar(timestamp=start + timedelta(days=i), open=o, high=high, low=low,
                             close=c, volume=volume))
    return bars


def synthetic_dataset(days: int, seed: int = 0, start: date = START, noise: float = 0.01,
                      trend: float = 0.05) -> Dataset:
    return Dataset.from_bars(synthetic_bars(days, seed, start, noise, trend))


def tiny_model_config(**overrides) -> ModelConfig:
    settings = dict(cblock_seq_lens=[3, 4], cmblocks_per_cblock=1, d_state=3, model_dim=3,
                    expand=1, d_conv=2, lookback=3)
    settings.update(overrides)
    return ModelConfig(**settings)


def small_split(start: date = START) -> SplitSpec:
    return SplitSpec(
        train_start=start,
        train_end=start + timedelta(days=120),
        val_end=start + timedelta(days=160),
        test_end=start + timedelta(days=200),
    )


@pytest.fixture
def dataset() -> Dataset:
    return synthetic_dataset(200)


@pytest.fixture
def run_config(tmp_path, dataset) -> RunConfig:
    """Fast end-to-end config over a 200-day synthetic file written to tmp_path"""
    from crypto_mamba.data import serialize_csv

    data_path = tmp_path / "btc.csv"
    data_path.write_text(serialize_csv(dataset), encoding="utf-8")
    return RunConfig(
        data_path=data_path,
        split=small_split(),
        model=tiny_model_config(cblock_seq_lens=[6, 4], lookback=6),
        train=TrainConfig(learning_rate=0.01, batch_size=16, max_epochs=2, seed=3,
                          scheduler=SchedulerConfig(plateau_patience=2)),
        output_dir=tmp_path / "run",
    )
