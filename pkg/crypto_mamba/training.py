"""
Mini-batch training with RMSE loss, Adam with decoupled weight decay,
reduce-on-plateau learning rate and early stopping on validation RMSE.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt

from .autograd import ParamStore, Tensor, as_tensor, backward, no_grad, sqrt
from .data import WindowSample, stack_windows
from .errors import EmptyInput, MissingGradient, NonFiniteActivation, NonFiniteLoss, ShapeMismatch
from .nn import make_rng

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class SchedulerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    plateau_factor: float = Field(default=0.5, gt=0, lt=1)
    plateau_patience: PositiveInt = 5


class TrainConfig(BaseModel):
    """
    Optimization settings.

    learning_rate and weight_decay defaults are engineering choices, not
    reference values; tune them per model.
    """

    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: PositiveInt = 32
    weight_decay: float = Field(default=1e-4, ge=0)
    scheduler: SchedulerConfig = Field(default_factory=SchedulerConfig)
    early_stop_patience: PositiveInt = 10
    max_epochs: int = Field(default=200, ge=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)


class Forecaster(Protocol):
    params: ParamStore

    def forward(self, inputs) -> Tensor: ...


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_rmse: float
    val_rmse: float
    lr: float


@dataclass
class TrainResult:
    best_params: Dict[str, np.ndarray]
    best_val_rmse: float
    best_epoch: int
    history: List[EpochRecord]
    stopped_early: bool = False


def rmse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"rmse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return sqrt((diff * diff).mean())


def adam_step(store: ParamStore, state: AdamState, config: TrainConfig,
              lr: Optional[float] = None) -> None:
    """One Adam update; decay is applied to the parameter before the Adam delta"""
    lr = config.learning_rate if lr is None else lr
    for path, param in store.items():
        if param.grad is None:
            raise MissingGradient(path)
    state.step += 1
    t = state.step
    for path, param in store.items():
        g = param.grad
        m = ADAM_BETA1 * state.m.get(path, 0.0) + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v.get(path, 0.0) + (1 - ADAM_BETA2) * g * g
        state.m[path], state.v[path] = m, v
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        decayed = param.values * (1 - lr * config.weight_decay)
        param.values = decayed - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


class PlateauScheduler:
    """Multiply the learning rate by `factor` after `patience` epochs without improvement"""

    def __init__(self, lr: float, config: SchedulerConfig):
        self.lr = lr
        self.factor = config.plateau_factor
        self.patience = config.plateau_patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> None:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            logger.info(f"Validation plateau, learning rate reduced to {self.lr:.3g}")


def batch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    """Shuffled sample indices for one epoch, keyed by (seed, epoch)"""
    return make_rng(seed, epoch).permutation(count)


def evaluate_rmse(model: Forecaster, inputs: np.ndarray, targets: np.ndarray,
                  chunk: int = 256, epoch: int = 0) -> float:
    """Validation RMSE; non-finite predictions abort as NonFiniteLoss at `epoch`"""
    try:
        with no_grad():
            predictions = np.concatenate([
                model.forward(inputs[start:start + chunk]).values.reshape(-1)
                for start in range(0, len(inputs), chunk)
            ])
    except NonFiniteActivation:
        raise NonFiniteLoss(epoch, None, math.nan)
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


def train(model: Forecaster, train_windows: Sequence[WindowSample], val_windows: Sequence[WindowSample],
          config: TrainConfig,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """
    Fit model.params to the training windows.

    The parameters with the lowest validation RMSE are returned and also
    loaded back into the model. With max_epochs = 0 the initial parameters
    come back with an empty history.
    """
    if not train_windows or not val_windows:
        raise EmptyInput("training needs nonempty train and validation windows")

    inputs, targets = stack_windows(train_windows)
    val_inputs, val_targets = stack_windows(val_windows)
    store = model.params
    count = len(targets)

    best_params = store.snapshot()
    if config.max_epochs == 0:
        return TrainResult(best_params, evaluate_rmse(model, val_inputs, val_targets), 0, [])

    state = AdamState()
    scheduler = PlateauScheduler(config.learning_rate, config.scheduler)
    best_val, best_epoch, bad_epochs = math.inf, 0, 0
    history: List[EpochRecord] = []
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        lr = scheduler.lr
        order = batch_order(config.seed, epoch, count)
        squared_error = 0.0
        for batch_index, start in enumerate(range(0, count, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                prediction = model.forward(inputs[idx])
            except NonFiniteActivation:
                raise NonFiniteLoss(epoch, batch_index, math.nan)
            loss = rmse_loss(prediction, Tensor(targets[idx]))
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, batch_index, value)
            backward(loss, store)
            adam_step(store, state, config, lr)
            squared_error += value * value * len(idx)

        val_rmse = evaluate_rmse(model, val_inputs, val_targets, epoch=epoch)
        if not math.isfinite(val_rmse):
            raise NonFiniteLoss(epoch, None, val_rmse)
        record = EpochRecord(epoch, math.sqrt(squared_error / count), val_rmse, lr)
        history.append(record)
        logger.info(f"epoch {epoch}: train_rmse={record.train_rmse:.6f} "
                    f"val_rmse={val_rmse:.6f} lr={lr:.3g}")
        if on_epoch:
            on_epoch(record)

        if val_rmse < best_val:
            best_val, best_epoch, bad_epochs = val_rmse, epoch, 0
            best_params = store.snapshot()
        else:
            bad_epochs += 1
        scheduler.step(val_rmse)
        if bad_epochs >= config.early_stop_patience:
            logger.info(f"Early stop at epoch {epoch}; best val_rmse={best_val:.6f} at epoch {best_epoch}")
            stopped_early = True
            break

    store.load(best_params)
    return TrainResult(best_params, best_val, best_epoch, history, stopped_early)
