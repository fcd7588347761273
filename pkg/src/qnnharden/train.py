"""Float reference models and a small deterministic MLP trainer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels_py import conv2d_acc
from .data import Dataset
from .network import Flatten, MaxPool2D, ReLU

LEARNING_RATE = 0.1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class FloatDense:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray

    kind = "dense"


@dataclass(frozen=True, eq=False)
class FloatConv2D:
    weight: np.ndarray  # [out_c, in_c, kh, kw]
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    kind = "conv2d"


@dataclass(frozen=True, eq=False)
class FloatModel:
    layers: tuple
    input_shape: tuple
    class_count: int
    name: str = "float"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (FloatDense, FloatConv2D)):
                if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                    raise ValueError(f"layers[{i}] holds non-finite values")

    def activations(self, x: np.ndarray) -> list:
        """Output of every layer for a float batch."""
        acts = []
        for layer in self.layers:
            if isinstance(layer, FloatDense):
                x = x @ layer.weight.T + layer.bias
            elif isinstance(layer, FloatConv2D):
                x = conv2d_acc(x, layer.weight, np.zeros(len(layer.bias)), layer.stride, layer.padding)
                x = x + layer.bias[None, :, None, None]
            elif isinstance(layer, ReLU):
                x = np.maximum(x, 0.0)
            elif isinstance(layer, MaxPool2D):
                from numpy.lib.stride_tricks import sliding_window_view

                win = sliding_window_view(x, (layer.window, layer.window), axis=(2, 3))
                x = win[:, :, :: layer.stride, :: layer.stride].max(axis=(4, 5))
            elif isinstance(layer, Flatten):
                x = x.reshape(len(x), -1)
            acts.append(x)
        return acts

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape((-1,) + tuple(self.input_shape))
        return self.activations(x)[-1]

    def accuracy(self, ds: Dataset) -> float:
        return float(np.mean(np.argmax(self.logits(ds.features), axis=1) == ds.labels))


def train_reference_mlp(
    dataset: Dataset,
    topology,
    epochs: int = 1000,
    seed: int = 0,
    learning_rate: float = LEARNING_RATE,
) -> FloatModel:
    """Full-batch gradient descent on softmax cross-entropy.

    ``topology`` lists layer widths, input first, e.g. ``[2, 16, 16, 4]``;
    hidden layers use ReLU. He-normal initialisation from ``seed``.
    """
    topology = [int(t) for t in topology]
    if epochs < 1:
        raise ValueError("epochs must be positive")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if len(topology) < 2 or topology[-1] != dataset.class_count:
        raise ValueError(f"topology must end in {dataset.class_count} units")
    if topology[0] != int(np.prod(dataset.feature_shape)):
        raise ValueError("topology input width does not match features")

    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(topology[:-1], topology[1:]):
        ws.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        bs.append(np.zeros(fan_out))

    x = dataset.features.reshape(len(dataset), -1)
    onehot = np.eye(topology[-1])[dataset.labels]
    n = len(x)
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is caught via the loss
        for epoch in range(epochs):
            hs = [x]
            for i, (w, b) in enumerate(zip(ws, bs)):
                z = hs[-1] @ w.T + b
                hs.append(np.maximum(z, 0.0) if i < len(ws) - 1 else z)
            z = hs[-1] - hs[-1].max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            loss = -np.mean(np.log(p[onehot == 1] + 1e-300))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}; lower the learning rate")
            g = (p - onehot) / n
            for i in range(len(ws) - 1, -1, -1):
                gw = g.T @ hs[i]
                gb = g.sum(axis=0)
                if i > 0:
                    g = (g @ ws[i]) * (hs[i] > 0)
                ws[i] -= learning_rate * gw
                bs[i] -= learning_rate * gb

    layers = []
    for i, (w, b) in enumerate(zip(ws, bs)):
        layers.append(FloatDense(w, b))
        if i < len(ws) - 1:
            layers.append(ReLU())
    model = FloatModel(tuple(layers), (topology[0],), topology[-1], name="mlp-" + "-".join(map(str, topology)))
    model.metadata.update(
        trainer="full-batch gradient descent, softmax cross-entropy",
        init="he-normal",
        learning_rate=learning_rate,
        epochs=epochs,
        seed=seed,
        final_loss=float(loss),
        train_accuracy=model.accuracy(dataset),
    )
    return model
