"""
Trading rules driven by next-day forecasts, and a daily backtest.

Three decision rules: Vanilla (all-in/all-out above a move threshold),
Smart (position sizing inside a risk band around the forecast) and
Extended Smart (Smart plus short selling down to a fixed BTC cap).
Orders fill at the same close the decision was made on.
"""

import logging
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import (
    AlignmentError,
    BadRisk,
    InvariantViolation,
    NonPositivePrice,
    ShortCapExceeded,
    TradingError,
)
from .metrics import mdd

logger = logging.getLogger(__name__)

Strategy = Literal["vanilla", "smart", "extended_smart"]
STRATEGY_NAMES = ("vanilla", "smart", "extended_smart")

HOLD = "hold"
BUY_FRACTION = "buy_fraction"
SELL_FRACTION = "sell_fraction"
BUY_ALL = "buy_all"
SELL_ALL = "sell_all"
SELL_TO_SHORT_CAP = "sell_to_short_cap"
DECISION_KINDS = (HOLD, BUY_FRACTION, SELL_FRACTION, BUY_ALL, SELL_ALL, SELL_TO_SHORT_CAP)

TRACE_COLUMNS = ["date", "close", "prediction", "decision", "fraction", "cash", "position", "networth"]
SUMMARY_COLUMNS = ["strategy", "final_balance", "mdd_percent", "trades", "nonpositive_networth"]


class BacktestConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategies: List[Strategy] = Field(default_factory=lambda: list(STRATEGY_NAMES))
    threshold: float = Field(default=0.01, ge=0)
    risk: float = Field(default=2.0, gt=0, lt=100, description="Risk band half-width in percent")
    max_short: float = Field(default=0.002, ge=0, description="Short cap in BTC")
    fee_rate: float = Field(default=0.0, ge=0, lt=1)
    initial_cash: float = Field(default=100.0, gt=0)

    @field_validator("strategies")
    @classmethod
    def _unique(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one strategy is required")
        if len(set(value)) != len(value):
            raise ValueError(f"duplicate strategies in {value}")
        return value


@dataclass(frozen=True)
class PortfolioState:
    cash: float
    position: float = 0.0

    def networth(self, price: float) -> float:
        return self.cash + self.position * price


@dataclass(frozen=True)
class TradeDecision:
    kind: str
    fraction: Optional[float] = None
    short_cap: Optional[float] = None

    def __post_init__(self):
        if self.kind not in DECISION_KINDS:
            raise TradingError(f"unknown decision kind '{self.kind}'")
        fractional = self.kind in (BUY_FRACTION, SELL_FRACTION)
        if fractional != (self.fraction is not None):
            raise TradingError(f"{self.kind} {'needs' if fractional else 'takes no'} fraction")
        if fractional and not 0.0 <= self.fraction <= 1.0:
            raise TradingError(f"fraction {self.fraction} outside [0, 1]")
        if (self.kind == SELL_TO_SHORT_CAP) != (self.short_cap is not None):
            raise TradingError("short_cap goes with sell_to_short_cap only")


def _check_prices(x: float, y: float) -> None:
    if not (x > 0 and math.isfinite(x)):
        raise NonPositivePrice(f"today's price must be positive, got {x}")
    if not (y > 0 and math.isfinite(y)):
        raise NonPositivePrice(f"predicted price must be positive, got {y}")


def _risk_band(y: float, risk: float):
    if not 0 < risk < 100:
        raise BadRisk(f"risk must lie in (0, 100) percent, got {risk}")
    return (1 + risk / 100) * y, (1 - risk / 100) * y


def _buy_branch(x: float, y: float, y_min: float) -> TradeDecision:
    if x <= y_min:
        return TradeDecision(BUY_ALL)
    return TradeDecision(BUY_FRACTION, (y - x) / (y - y_min))


def vanilla_decide(x: float, y: float, threshold: float) -> TradeDecision:
    """All in when the forecast rises by at least threshold, all out when it falls"""
    _check_prices(x, y)
    if threshold < 0:
        raise TradingError(f"threshold must be nonnegative, got {threshold}")
    d = abs(x - y) / x
    if d < threshold or x == y:
        return TradeDecision(HOLD)
    return TradeDecision(SELL_ALL) if x > y else TradeDecision(BUY_ALL)


def smart_decide(x: float, y: float, risk: float) -> TradeDecision:
    _check_prices(x, y)
    y_max, y_min = _risk_band(y, risk)
    if x >= y:
        if x >= y_max:
            return TradeDecision(SELL_ALL)
        return TradeDecision(SELL_FRACTION, (x - y) / (y_max - y))
    return _buy_branch(x, y, y_min)


def extended_smart_decide(x: float, y: float, risk: float, position: float,
                          max_short: float) -> TradeDecision:
    _check_prices(x, y)
    y_max, y_min = _risk_band(y, risk)
    if max_short < 0:
        raise TradingError(f"max_short must be nonnegative, got {max_short}")
    if position < -max_short:
        raise ShortCapExceeded(f"position {position} is below the short cap -{max_short}")
    if x >= y_max:
        return TradeDecision(SELL_TO_SHORT_CAP, short_cap=max_short)
    if x >= y:
        # Fractional sells only reduce a long position.
        if position > 0:
            return TradeDecision(SELL_FRACTION, (x - y) / (y_max - y))
        return TradeDecision(HOLD)
    return _buy_branch(x, y, y_min)


def execute(state: PortfolioState, decision: TradeDecision, price: float,
            fee_rate: float = 0.0) -> PortfolioState:
    if not (price > 0 and math.isfinite(price)):
        raise NonPositivePrice(f"execution price must be positive, got {price}")
    cash, position = state.cash, state.position
    kind = decision.kind

    if kind in (BUY_FRACTION, BUY_ALL):
        spend = cash if kind == BUY_ALL else decision.fraction * cash
        cash = cash - spend
        position = position + spend * (1 - fee_rate) / price
    elif kind in (SELL_FRACTION, SELL_ALL):
        if position > 0:
            units = position if kind == SELL_ALL else decision.fraction * position
            cash = cash + units * price * (1 - fee_rate)
            position = position - units
    elif kind == SELL_TO_SHORT_CAP:
        units = position + decision.short_cap
        if units < 0:
            raise InvariantViolation(f"position {position} already beyond short cap {decision.short_cap}")
        cash = cash + units * price * (1 - fee_rate)
        position = -decision.short_cap

    if cash < 0:
        raise InvariantViolation(f"cash went negative ({cash}) after {kind}")
    return PortfolioState(cash, position)


DecideFn = Callable[[float, float, PortfolioState, BacktestConfig], TradeDecision]

DECIDERS: Dict[str, DecideFn] = {
    "vanilla": lambda x, y, state, cfg: vanilla_decide(x, y, cfg.threshold),
    "smart": lambda x, y, state, cfg: smart_decide(x, y, cfg.risk),
    "extended_smart": lambda x, y, state, cfg: extended_smart_decide(
        x, y, cfg.risk, state.position, cfg.max_short),
}


@dataclass
class TraceRow:
    date: Union[date, int]
    close: float
    prediction: float
    decision: str
    fraction: float
    cash: float
    position: float
    networth: float


@dataclass
class BacktestResult:
    strategy: str
    networth: np.ndarray
    final_balance: float
    mdd_percent: float
    trades: int
    nonpositive_networth: bool
    trace: List[TraceRow] = field(default_factory=list)

    def summary_row(self) -> Dict[str, object]:
        return {
            "strategy": self.strategy,
            "final_balance": self.final_balance,
            "mdd_percent": self.mdd_percent,
            "trades": self.trades,
            "nonpositive_networth": self.nonpositive_networth,
        }


def backtest(closes: Sequence[float], predictions: Sequence[float], strategy: str,
             config: Optional[BacktestConfig] = None,
             dates: Optional[Sequence[date]] = None) -> BacktestResult:
    """
    Simulate one strategy day by day.

    predictions[t] forecasts closes[t + 1]. predictions may be as long as
    closes, or one shorter, in which case the last day is only valued.
    Net worth is cash + position * close after each day's trade; the final
    day is marked to market, never liquidated.
    """
    config = config or BacktestConfig()
    if strategy not in DECIDERS:
        raise TradingError(f"unknown strategy '{strategy}', expected one of {STRATEGY_NAMES}")
    closes = np.asarray(closes, dtype=np.float64).reshape(-1)
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    days = len(closes)
    if days == 0:
        raise AlignmentError("backtest needs at least one day of prices")
    if len(predictions) not in (days, days - 1):
        raise AlignmentError(f"{len(predictions)} predictions do not align with {days} closes")
    if dates is not None and len(dates) != days:
        raise AlignmentError(f"{len(dates)} dates for {days} closes")

    decide = DECIDERS[strategy]
    floor = -config.max_short if strategy == "extended_smart" else 0.0
    state = PortfolioState(config.initial_cash, 0.0)
    networth = np.empty(days)
    trace: List[TraceRow] = []
    trades = 0

    for t in range(days):
        x = float(closes[t])
        if t < len(predictions):
            y = float(predictions[t])
            decision = decide(x, y, state, config)
        else:
            y = math.nan
            decision = TradeDecision(HOLD)
        new_state = execute(state, decision, x, config.fee_rate)
        if new_state.position < floor:
            raise InvariantViolation(f"{strategy}: position {new_state.position} below {floor} on day {t}")
        if new_state != state:
            trades += 1
        state = new_state
        networth[t] = state.networth(x)
        trace.append(TraceRow(
            date=dates[t] if dates is not None else t,
            close=x,
            prediction=y,
            decision=decision.kind,
            fraction=math.nan if decision.fraction is None else decision.fraction,
            cash=state.cash,
            position=state.position,
            networth=float(networth[t]),
        ))

    nonpositive = bool(np.any(networth <= 0))
    mdd_percent = 100.0 if nonpositive else 100.0 * mdd(networth)
    if nonpositive:
        logger.warning(f"{strategy}: net worth went nonpositive; drawdown reported as 100%")
    result = BacktestResult(strategy, networth, float(networth[-1]), mdd_percent, trades, nonpositive, trace)
    logger.info(f"{strategy}: final balance {result.final_balance:.2f}, "
                f"MDD {mdd_percent:.2f}%, {trades} trades")
    return result


def _write_frame(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", float_format=lambda v: repr(float(v)))
    return path


def trace_frame(result: BacktestResult) -> pd.DataFrame:
    rows = [[str(r.date), r.close, r.prediction, r.decision, r.fraction, r.cash, r.position, r.networth]
            for r in result.trace]
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)


def write_trace_csv(result: BacktestResult, path: Union[str, Path]) -> Path:
    return _write_frame(trace_frame(result), path)


def write_summary_csv(results: Sequence[BacktestResult], path: Union[str, Path]) -> Path:
    frame = pd.DataFrame([r.summary_row() for r in results], columns=SUMMARY_COLUMNS)
    return _write_frame(frame, path)
