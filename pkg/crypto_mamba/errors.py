"""
Exception hierarchy for crypto-mamba.

Every error the engine raises derives from CryptoMambaError and, through
its category base, from ValueError. The CLI maps categories to exit codes.
"""

from datetime import date
from typing import Optional


class CryptoMambaError(ValueError):
    """Base class for all engine errors"""


class DataError(CryptoMambaError):
    """Problems with input market data or its windowing"""


class ComputeError(CryptoMambaError):
    """Autodiff, model and training failures"""


class MetricError(CryptoMambaError):
    """Invalid metric inputs"""


class TradingError(CryptoMambaError):
    """Invalid trading decisions or backtest inputs"""


class ConfigError(CryptoMambaError):
    """Invalid run configuration"""


class ArtifactError(CryptoMambaError):
    """Missing or unreadable run artifacts"""


# Data

class MalformedRow(DataError):
    def __init__(self, row: int, reason: str):
        self.row = row
        self.reason = reason
        super().__init__(f"row {row}: {reason}")


class NonMonotonicDates(DataError):
    def __init__(self, row: int, previous: date, current: date):
        self.row = row
        super().__init__(f"row {row}: date {current} does not follow {previous}")


class MissingDay(DataError):
    def __init__(self, row: int, missing: date):
        self.row = row
        self.missing = missing
        super().__init__(f"row {row}: calendar gap, {missing} is missing")


class EmptyInput(DataError):
    pass


class InsufficientCoverage(DataError):
    pass


class SegmentTooShort(DataError):
    pass


class DegenerateFeature(DataError):
    def __init__(self, feature: str):
        self.feature = feature
        super().__init__(f"feature '{feature}' is constant over the training split")


# Compute

class ShapeMismatch(ComputeError):
    pass


class NotScalarLoss(ComputeError):
    pass


class MissingGradient(ComputeError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"parameter '{path}' has no gradient")


class NonFiniteLoss(ComputeError):
    def __init__(self, epoch: int, batch_index: Optional[int], value: float):
        self.epoch = epoch
        self.batch_index = batch_index
        where = "validation" if batch_index is None else f"batch {batch_index}"
        super().__init__(f"non-finite loss {value} at epoch {epoch}, {where}")


class NonFiniteActivation(ComputeError):
    pass


class NonPositiveDelta(ComputeError):
    pass


class LengthMismatch(ComputeError, MetricError):
    pass


class CheckpointMismatch(ConfigError):
    pass


# Metrics

class EmptySeries(MetricError):
    pass


class ZeroActual(MetricError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"actual value at index {index} is zero")


class NonPositiveValue(MetricError):
    def __init__(self, index: int, value: float):
        self.index = index
        super().__init__(f"portfolio value {value} at index {index} is not positive")


# Trading

class NonPositivePrice(TradingError):
    pass


class BadRisk(TradingError):
    pass


class ShortCapExceeded(TradingError):
    pass


class InvariantViolation(TradingError):
    pass


class AlignmentError(TradingError):
    pass


# Artifacts

class MissingArtifact(ArtifactError):
    def __init__(self, path: str, hint: Optional[str] = None):
        self.path = path
        message = f"missing artifact: {path}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)
