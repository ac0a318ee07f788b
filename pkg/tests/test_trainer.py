import numpy as np
import pytest

from vesselnet import checkpoint, trainer
from vesselnet.autodiff import parameter, shadow64
from vesselnet.data import synthetic_vessels
from vesselnet.errors import ConfigError, ContractError, DivergenceError
from vesselnet.losses import LossWeights
from vesselnet.model import ModelConfig, build
from vesselnet.optim import AdamState, adam_step
from vesselnet.rng import Rng
from vesselnet.trainer import EarlyStopping, TrainPlan, train, train_step, validation_loss

TINY = ModelConfig(channels=(8, 8, 8, 8))


def test_adam_first_step_matches_hand_computation():
    with shadow64():
        params = {"w": parameter(np.array([1.0, -2.0, 0.5]))}
        g = np.array([0.3, -0.1, 2.0])
        state = AdamState(lr=0.01)
        adam_step(params, {"w": g}, state)
    m, v = 0.1 * g, 0.001 * g * g
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(params["w"].data.reshape(-1), expected, atol=1e-9)
    assert state.t == 1


def test_adam_zero_gradient_is_a_no_op():
    params = {"w": parameter(np.arange(4.0))}
    before = params["w"].data.copy()
    state = AdamState()
    for _ in range(5):
        adam_step(params, {"w": np.zeros(4)}, state)
    np.testing.assert_array_equal(params["w"].data, before)


def test_adam_minimises_quadratic():
    params = {"w": parameter(np.zeros(1))}
    state = AdamState(lr=0.1)
    for _ in range(200):
        w = float(params["w"].data.reshape(-1)[0])
        adam_step(params, {"w": np.array([2 * (w - 3)])}, state)
    assert abs(float(params["w"].data.reshape(-1)[0]) - 3) < 1e-2


def test_adam_requires_every_gradient():
    with pytest.raises(ContractError):
        adam_step({"a": parameter(np.zeros(1)), "b": parameter(np.zeros(1))},
                  {"a": np.zeros(1)}, AdamState())


def test_early_stopping_counter():
    es = EarlyStopping(2)
    assert es.update(1, 1.0) == (True, False)
    assert es.update(2, 1.0) == (False, False)   # equal is not an improvement
    assert es.update(3, 0.5) == (True, False)
    assert es.update(4, 0.6) == (False, False)
    assert es.update(5, 0.7) == (False, True)
    assert es.best_epoch == 3


def test_plan_validation():
    with pytest.raises(ConfigError):
        TrainPlan(batch_size=0)
    with pytest.raises(ConfigError):
        TrainPlan(patience=0)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_vessels(3, 16, seed=4)


def test_patience_one_stops_after_second_epoch(tiny_data, monkeypatch):
    values = iter([1.0, 2.0, 3.0, 4.0])
    monkeypatch.setattr(trainer, "validation_loss", lambda *a, **k: next(values))
    result = train(TrainPlan(max_epochs=10, patience=1, batch_size=3), TINY, tiny_data, tiny_data)
    assert len(result.history) == 2
    assert result.best_epoch == 1


def test_best_parameters_are_restored(tiny_data, tmp_path):
    plan = TrainPlan(max_epochs=4, patience=10, batch_size=2, seed=3)
    result = train(plan, TINY, tiny_data[:2], tiny_data[2:], out_dir=tmp_path)
    vals = [r.val_loss for r in result.history]
    assert result.best_val_loss == min(vals)
    assert result.best_epoch == 1 + int(np.argmin(vals))
    best, state = checkpoint.load_checkpoint(tmp_path / "best.sau2")
    assert state is None
    again = validation_loss(best, tiny_data[2:], 2, plan.weights)
    assert again == pytest.approx(result.best_val_loss, rel=1e-6)
    assert all(again <= v + 1e-6 for v in vals)
    _, last_state = checkpoint.load_checkpoint(tmp_path / "last.sau2")
    assert last_state.t == 4
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,seconds"
    assert lines[-1] == f"best_epoch={result.best_epoch}"


def test_training_is_seed_deterministic(tiny_data):
    plan = TrainPlan(max_epochs=2, batch_size=2, seed=8)
    a = train(plan, TINY, tiny_data, tiny_data)
    b = train(plan, TINY, tiny_data, tiny_data)
    assert all(np.array_equal(a.best_params[k].data, b.best_params[k].data) for k in a.best_params)


def test_nan_parameters_raise_divergence(tiny_data):
    params = build(TINY, Rng(0))
    params["enc1.block1.conv.bias"] = parameter(np.full((1, 8, 1, 1), np.nan, np.float32))
    x = np.stack([s.image for s in tiny_data])
    y = np.stack([s.label for s in tiny_data])
    with pytest.raises(DivergenceError) as err:
        train_step(params, AdamState(), x, y, LossWeights(), Rng(0))
    assert "non-finite" in str(err.value) or "diverged" in str(err.value)


def test_train_step_reduces_loss_on_fixed_batch(tiny_data):
    cfg = TINY.with_(dropblock=TINY.dropblock.__class__(enabled=False))
    params, state = build(cfg, Rng(1)), AdamState()
    x = np.stack([s.image for s in tiny_data])
    y = np.stack([s.label for s in tiny_data])
    first = train_step(params, state, x, y, LossWeights(), Rng(0))
    for i in range(30):
        last = train_step(params, state, x, y, LossWeights(), Rng(i))
    assert last < first
