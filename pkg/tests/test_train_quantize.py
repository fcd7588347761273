"""Reference trainer, quantizer and the bundled fixture."""

import numpy as np
import pytest

from qnnharden import engine
from qnnharden.data import blobs2d, separable_blobs
from qnnharden.network import Dense
from qnnharden.quantize import quantize, tensor_scale
from qnnharden.train import FloatDense, FloatModel, TrainingDiverged, train_reference_mlp


def _quant_accuracy(net, ds):
    x = engine.quantize_input(net, ds.features)
    return float(np.mean(engine.forward_batch(net, x)[1] == ds.labels))


def test_separable_data_single_layer():
    ds = separable_blobs()
    fm = train_reference_mlp(ds, [2, 2], epochs=200, seed=0)
    assert fm.accuracy(ds) >= 0.99


def test_trainer_is_deterministic():
    ds = blobs2d("train", seed=1, n_per_class=20)
    a = train_reference_mlp(ds, [2, 8, 4], epochs=50, seed=5)
    b = train_reference_mlp(ds, [2, 8, 4], epochs=50, seed=5)
    for la, lb in zip(a.layers, b.layers):
        if isinstance(la, FloatDense):
            assert np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)
    assert a.metadata == b.metadata
    assert a.metadata["seed"] == 5 and a.metadata["learning_rate"] > 0


def test_trainer_validation():
    ds = blobs2d("train", seed=1, n_per_class=5)
    with pytest.raises(ValueError):
        train_reference_mlp(ds, [2, 8, 3])
    with pytest.raises(ValueError):
        train_reference_mlp(ds, [3, 4])
    with pytest.raises(ValueError):
        train_reference_mlp(ds, [2, 4], epochs=0)


def test_divergence_is_reported():
    ds = blobs2d("train", seed=1, n_per_class=20)
    with pytest.raises(TrainingDiverged, match="epoch"):
        train_reference_mlp(ds, [2, 16, 4], epochs=50, seed=0, learning_rate=1e6)


def test_fixture_accuracy(fixture_mlp):
    acc = fixture_mlp.accuracies()
    print("fixture accuracies:", acc)
    assert acc["float_train"] >= 0.90
    assert acc["float_test"] >= 0.90
    assert acc["quant_test"] >= 0.90
    assert acc["float_test"] - acc["quant_test"] <= 0.03
    assert acc["quant_test"] == _quant_accuracy(fixture_mlp.net, fixture_mlp.test)


def _one_layer(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    return FloatModel((FloatDense(w, np.zeros(len(w)) if b is None else np.asarray(b, float)),), (w.shape[1],), w.shape[0])


def _calib(x, classes=2):
    from qnnharden.data import Dataset

    x = np.asarray(x, dtype=np.float64)
    return Dataset(x, np.arange(len(x)) % classes, "train", classes)


def test_exact_grid_weights_quantize_without_error():
    s = 0.03125
    w = s * np.array([[127, -127, 64], [-5, 0, 127]])
    net = quantize(_one_layer(w), _calib([[1.0, -1.0, 0.5], [0.2, 0.3, -0.4]]))
    layer = net.layers[0]
    assert isinstance(layer, Dense)
    assert layer.weight_scale == s
    assert np.array_equal(layer.weight.astype(float) * s, w)


def test_zero_calibration_activation_scale_is_one():
    net = quantize(_one_layer([[1.0, 2.0]]), _calib(np.zeros((3, 2)), 1))
    assert net.input_scale == 1.0 and net.layers[0].output_scale == 1.0


def test_all_zero_weight_tensor_scale_is_one():
    assert tensor_scale(np.zeros((3, 3))) == 1.0
    net = quantize(_one_layer(np.zeros((2, 2))), _calib([[1.0, 0.0], [0.0, 1.0]]))
    assert net.layers[0].weight_scale == 1.0 and not net.layers[0].weight.any()


@pytest.mark.parametrize("k", [0.5, 2.0, 3.0])
def test_weight_scaling_moves_only_the_scale(k):
    rng = np.random.default_rng(int(k * 10))
    w = rng.standard_normal((4, 3))
    calib = _calib(rng.standard_normal((8, 3)))
    a = quantize(_one_layer(w), calib).layers[0]
    b = quantize(_one_layer(k * w), calib).layers[0]
    assert b.weight_scale == pytest.approx(k * a.weight_scale, rel=1e-12)
    assert np.array_equal(a.weight, b.weight)


def test_quantizer_rejects_empty_calibration():
    with pytest.raises(ValueError):
        quantize(_one_layer([[1.0]]), _calib(np.zeros((0, 1)), 1))


def test_non_finite_float_model_rejected():
    with pytest.raises(ValueError):
        _one_layer([[np.inf, 0.0]])
