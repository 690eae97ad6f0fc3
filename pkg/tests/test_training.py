import math
from datetime import date, timedelta

import numpy as np
import pytest

from crypto_mamba.autograd import ParamStore, Tensor, as_tensor, backward, check_gradients
from crypto_mamba.data import SplitSpec, WindowSample, fit_normalizer, make_windows, split, stack_windows
from crypto_mamba.errors import EmptyInput, MissingGradient, NonFiniteLoss, ShapeMismatch
from crypto_mamba.model import CryptoMamba
from crypto_mamba.nn import Linear, make_rng
from crypto_mamba.training import (
    AdamState,
    PlateauScheduler,
    SchedulerConfig,
    TrainConfig,
    adam_step,
    batch_order,
    evaluate_rmse,
    rmse_loss,
    train,
)

from .conftest import START, synthetic_dataset, tiny_model_config


class LinearForecaster:
    """Flattens each window and applies one affine map"""

    def __init__(self, features: int, seed: int = 0):
        self.params = ParamStore()
        self.layer = Linear.create(self.params, "fc", features, 1, make_rng(seed))

    def forward(self, inputs) -> Tensor:
        x = as_tensor(inputs)
        out = self.layer(x.reshape((x.shape[0], -1)))
        return out.reshape((x.shape[0],))


def _doubling_windows(count: int, seed: int):
    xs = np.random.default_rng(seed).uniform(-1.0, 1.0, size=count)
    return [WindowSample(inputs=np.array([[x]]), target=2.0 * x,
                         target_date=START + timedelta(days=i)) for i, x in enumerate(xs)]


def _scalar_store(value: float, grad):
    store = ParamStore()
    p = store.add("p", [value])
    p.grad = None if grad is None else np.array([grad])
    return store, p


def test_rmse_loss_is_zero_on_exact_prediction():
    assert rmse_loss(np.array([1.0, -2.0]), np.array([1.0, -2.0])).item() == 0.0


def test_rmse_loss_example():
    assert rmse_loss(np.array([0.0, 4.0]), np.zeros(2)).item() == pytest.approx(math.sqrt(8.0))


def test_rmse_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        rmse_loss(np.zeros(3), np.zeros(2))


def test_rmse_loss_gradients():
    pred = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    target = np.array([0.1, 0.5, 1.0])
    result = check_gradients(lambda p: rmse_loss(p, target), [pred])
    assert result.ok, result.worst


def test_adam_first_step_moves_by_learning_rate():
    store, p = _scalar_store(0.0, 1.0)
    adam_step(store, AdamState(), TrainConfig(learning_rate=0.1, weight_decay=0.0))
    assert p.values[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_zero_gradient_leaves_parameter():
    store, p = _scalar_store(0.7, 0.0)
    adam_step(store, AdamState(), TrainConfig(learning_rate=0.1, weight_decay=0.0))
    assert p.values[0] == 0.7


def test_adam_weight_decay_is_decoupled():
    store, p = _scalar_store(1.0, 0.0)
    adam_step(store, AdamState(), TrainConfig(learning_rate=0.1, weight_decay=0.01))
    assert p.values[0] == pytest.approx(0.999, abs=1e-15)


def test_adam_requires_gradients():
    store, _ = _scalar_store(1.0, None)
    with pytest.raises(MissingGradient):
        adam_step(store, AdamState(), TrainConfig())


def test_plateau_scheduler_halves_after_patience():
    scheduler = PlateauScheduler(1.0, SchedulerConfig(plateau_factor=0.5, plateau_patience=2))
    for metric in (1.0, 0.9, 0.95, 0.95):
        scheduler.step(metric)
    assert scheduler.lr == 0.5
    scheduler.step(0.8)
    assert scheduler.lr == 0.5


def test_batch_order_is_keyed_by_seed_and_epoch():
    first = batch_order(5, 1, 50)
    np.testing.assert_array_equal(first, batch_order(5, 1, 50))
    assert sorted(first.tolist()) == list(range(50))
    assert not np.array_equal(first, batch_order(5, 2, 50))
    assert not np.array_equal(first, batch_order(6, 1, 50))


def test_zero_epochs_returns_initial_parameters():
    model = LinearForecaster(1)
    initial = model.params.snapshot()
    result = train(model, _doubling_windows(20, 0), _doubling_windows(10, 1), TrainConfig(max_epochs=0))
    assert result.history == []
    for path, values in initial.items():
        np.testing.assert_array_equal(result.best_params[path], values)


def test_empty_windows_are_rejected():
    with pytest.raises(EmptyInput):
        train(LinearForecaster(1), [], _doubling_windows(4, 0), TrainConfig())


def test_non_finite_loss_names_epoch_and_batch():
    model = LinearForecaster(1)
    model.params["fc.weight"].values[:] = np.nan
    with pytest.raises(NonFiniteLoss) as exc:
        train(model, _doubling_windows(8, 0), _doubling_windows(4, 1), TrainConfig(max_epochs=3))
    assert exc.value.epoch == 1
    assert exc.value.batch_index == 0


def test_linear_model_learns_doubling():
    model = LinearForecaster(1, seed=2)
    windows = _doubling_windows(256, 3)
    config = TrainConfig(learning_rate=0.05, batch_size=32, weight_decay=0.0, max_epochs=200,
                         early_stop_patience=200, scheduler=SchedulerConfig(plateau_patience=2))
    result = train(model, windows, _doubling_windows(64, 4), config)
    inputs, targets = stack_windows(windows)
    assert result.best_val_rmse < 1e-3
    assert evaluate_rmse(model, inputs, targets) < 1e-3
    assert model.params["fc.weight"].values[0, 0] == pytest.approx(2.0, abs=1e-2)


def _tiny_windows():
    dataset = synthetic_dataset(120)
    config = tiny_model_config()
    normalizer = fit_normalizer(dataset, config.use_volume)
    return config, make_windows(dataset, config.lookback, config.use_volume, normalizer)


def _tiny_run(seed: int = 1):
    config, windows = _tiny_windows()
    model = CryptoMamba(config, seed=seed)
    result = train(model, windows[:90], windows[90:],
                   TrainConfig(learning_rate=0.01, batch_size=16, max_epochs=4, seed=seed,
                               scheduler=SchedulerConfig(plateau_patience=1)))
    return model, result


def test_training_is_deterministic():
    a, result_a = _tiny_run()
    b, result_b = _tiny_run()
    assert [vars(r) for r in result_a.history] == [vars(r) for r in result_b.history]
    for path in a.params:
        np.testing.assert_array_equal(a.params[path].values, b.params[path].values)


def test_history_invariants():
    model, result = _tiny_run()
    assert [r.epoch for r in result.history] == list(range(1, len(result.history) + 1))
    assert all(result.best_val_rmse <= r.val_rmse for r in result.history)
    rates = [r.lr for r in result.history]
    assert all(later <= earlier for earlier, later in zip(rates, rates[1:]))
    assert result.history[result.best_epoch - 1].val_rmse == result.best_val_rmse
    for path, values in result.best_params.items():
        np.testing.assert_array_equal(model.params[path].values, values)


def test_non_finite_forward_in_cryptomamba_names_the_batch():
    config, windows = _tiny_windows()
    model = CryptoMamba(config, seed=1)
    model.params["merge.weight"].values[:] = np.nan
    with pytest.raises(NonFiniteLoss) as exc:
        train(model, windows[:90], windows[90:], TrainConfig(batch_size=16, max_epochs=2))
    assert exc.value.epoch == 1
    assert exc.value.batch_index == 0
    assert "batch 0" in str(exc.value)


def test_non_finite_validation_before_training():
    config, windows = _tiny_windows()
    model = CryptoMamba(config, seed=1)
    model.params["merge.bias"].values[:] = np.inf
    with pytest.raises(NonFiniteLoss) as exc:
        train(model, windows[:90], windows[90:], TrainConfig(max_epochs=0))
    assert exc.value.epoch == 0
    assert exc.value.batch_index is None


def test_backward_after_training_still_works():
    model, _ = _tiny_run()
    loss = model.forward(np.zeros((2, 3, 5))).sum()
    backward(loss, model.params)
    assert all(p.grad is not None for p in model.params.values())


@pytest.mark.slow
def test_desk_scale_model_beats_persistence():
    start = date(2015, 1, 1)
    dataset = synthetic_dataset(2000, seed=11, start=start, trend=0.01)
    spec = SplitSpec(train_start=start, train_end=start + timedelta(days=1400),
                     val_end=start + timedelta(days=1700), test_end=start + timedelta(days=2000))
    train_seg, val_seg, _ = split(dataset, spec)
    config = tiny_model_config(cblock_seq_lens=[14, 16], lookback=14, model_dim=8, d_state=8)
    normalizer = fit_normalizer(train_seg, config.use_volume)
    train_windows = make_windows(train_seg, config.lookback, config.use_volume, normalizer)
    val_windows = make_windows(val_seg, config.lookback, config.use_volume, normalizer)

    model = CryptoMamba(config, seed=0)
    result = train(model, train_windows, val_windows,
                   TrainConfig(learning_rate=3e-3, batch_size=32, max_epochs=200, early_stop_patience=20))

    persistence = np.array([normalizer.apply_target(w.anchor_close) for w in val_windows])
    targets = np.array([w.target for w in val_windows])
    persistence_rmse = float(np.sqrt(np.mean((persistence - targets) ** 2)))
    assert result.best_val_rmse < persistence_rmse
