import json

import numpy as np
import pytest

from gridtwin.errors import DimensionError, TrainingDiverged
from gridtwin.neural import (MlpModel, TrainConfig, chain_rule_jacobian, init_model,
                             load_model, loss_and_gradients, network_jacobian, predict,
                             save_model, train)
from gridtwin.telemetry import FluctuationConfig, simulate_series

from conftest import series9, trained9
from oracles import FIXTURES, fd_gradient, fd_vector_jacobian

SMALL = dict(train_range=(0, 500), test_range=(500, 600), epochs=3, seed=7)


def _small_series(net9):
    return simulate_series(net9, FluctuationConfig(samples=600, seed=11))


def _random_model(sizes, seed):
    rng = np.random.default_rng(seed)
    m = init_model(sizes, seed)
    return MlpModel(m.layer_sizes, m.weights, tuple(rng.normal(size=b.shape) for b in m.biases),
                    rng.normal(size=sizes[0]), rng.uniform(0.5, 2, sizes[0]),
                    rng.normal(size=sizes[-1]), rng.uniform(0.5, 2, sizes[-1]))


def test_zero_weights_predict_zero():
    m = init_model([3, 4, 2])
    zero = MlpModel(m.layer_sizes, tuple(w * 0 for w in m.weights), m.biases,
                    m.x_mean, m.x_scale, m.y_mean, m.y_scale)
    np.testing.assert_array_equal(predict(zero, np.array([1.0, -2.0, 3.0])), 0.0)


def test_single_layer_is_affine():
    rng = np.random.default_rng(0)
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    m = MlpModel((4, 3), (w,), (b,), np.zeros(4), np.ones(4), np.zeros(3), np.ones(3))
    x = rng.normal(size=4)
    np.testing.assert_allclose(predict(m, x), w @ x + b)
    np.testing.assert_allclose(network_jacobian(m, x), w)


def test_shapes_are_checked():
    m = init_model([3, 5, 3])
    with pytest.raises(DimensionError):
        predict(m, np.ones(4))
    with pytest.raises(DimensionError):
        MlpModel((3, 5, 3), m.weights[:1], m.biases[:1], m.x_mean, m.x_scale, m.y_mean,
                 m.y_scale)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(train_range=(0, 100), test_range=(50, 150))
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = _random_model([4, 6, 5, 3], seed)
    z, t = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
    _, dws, dbs = loss_and_gradients(m, z, t)
    params = [w.copy() for w in m.weights] + [b.copy() for b in m.biases]
    k = len(m.weights)

    def loss():
        mm = MlpModel(m.layer_sizes, tuple(params[:k]), tuple(params[k:]), m.x_mean, m.x_scale,
                      m.y_mean, m.y_scale)
        return loss_and_gradients(mm, z, t)[0]
    for g, ref in zip(dws + dbs, fd_gradient(loss, params)):
        assert np.abs(g - ref).max() <= 1e-5 * max(np.abs(ref).max(), 1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_chain_rule_matches_finite_differences(seed):
    m = _random_model([5, 8, 8, 5], seed)
    x = np.random.default_rng(seed + 10).normal(size=5)
    j = chain_rule_jacobian(m, x).values
    ref = fd_vector_jacobian(lambda v: predict(m, v), x)
    assert np.abs(j - ref).max() / np.abs(ref).max() < 1e-6


def test_linear_activations_multiply_weights():
    rng = np.random.default_rng(3)
    w1, w2 = rng.normal(size=(4, 3)), rng.normal(size=(3, 4))
    # tiny weights keep tanh in its linear range; compare against the product W2 W1
    m = MlpModel((3, 4, 3), (1e-5 * w1, w2), (np.zeros(4), np.zeros(3)), np.zeros(3),
                 np.ones(3), np.zeros(3), np.ones(3))
    np.testing.assert_allclose(network_jacobian(m, np.zeros(3)), 1e-5 * w2 @ w1, rtol=1e-12)


def test_zero_epochs_returns_initialization(net9):
    s = _small_series(net9)
    res = train(s, TrainConfig(**{**SMALL, "epochs": 0}), [14, 6, 14])
    init = init_model([14, 6, 14], 7)
    for a, b in zip(res.model.weights, init.weights):
        np.testing.assert_array_equal(a, b)
    assert len(res.losses) == 1


def test_training_is_deterministic(net9):
    s = _small_series(net9)
    a = train(s, TrainConfig(**SMALL), [14, 10, 14])
    b = train(s, TrainConfig(**SMALL), [14, 10, 14])
    for wa, wb in zip(a.model.weights, b.model.weights):
        assert wa.tobytes() == wb.tobytes()
    assert a.losses == b.losses
    assert a.losses[-1] < a.losses[0]


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_huge_learning_rate_diverges(net9, optimizer):
    s = _small_series(net9)
    with pytest.raises(TrainingDiverged) as err:
        train(s, TrainConfig(**{**SMALL, "learning_rate": 1e3, "optimizer": optimizer}))
    assert err.value.epoch == 1


def test_save_load_round_trip(tmp_path, net9):
    s = _small_series(net9)
    m = train(s, TrainConfig(**SMALL), [14, 10, 14]).model
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["activation"] == "tanh" and doc["layer_sizes"] == [14, 10, 14]
    x = s.x_series[:, 550]
    assert predict(back, x).tobytes() == predict(m, x).tobytes()
    assert back.index_map == m.index_map


def test_recorded_prediction_fixture(net9):
    doc = json.loads((FIXTURES / "reference" / "mlp_prediction.json").read_text())
    s = _small_series(net9)
    m = train(s, TrainConfig(**SMALL), doc["layer_sizes"]).model
    got = predict(m, s.x_series[:, doc["sample"]])
    assert [float(v).hex() for v in got] == doc["prediction_hex"]


def test_trained_monitor_tracks_load_buses():
    from gridtwin.neural import relative_rmse
    s = series9(0, 9600)
    res = trained9()
    labels = s.index_map.injection_labels()
    rows = [labels.index(b) for b in ("P5", "P7", "P9")]
    assert relative_rmse(res.model, s, rows, (8400, 9600)).max() < 0.05
    assert res.losses[-1] < 0.1 * res.losses[0]
