"""Post-training per-tensor symmetric int8 quantization."""

from __future__ import annotations

import numpy as np

from ._kernels_py import round_half_away
from .data import Dataset
from .network import Conv2D, Dense, Flatten, MaxPool2D, QNetwork, ReLU
from .train import FloatConv2D, FloatDense, FloatModel


def tensor_scale(values: np.ndarray) -> float:
    """``max|values| / 127``; 1.0 for an all-zero tensor."""
    m = float(np.max(np.abs(values))) if np.size(values) else 0.0
    return m / 127.0 if m > 0 else 1.0


def quantize_tensor(values: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(values, dtype=np.float64) / scale), -128, 127).astype(np.int8)


def quantize(fm: FloatModel, calibration: Dataset) -> QNetwork:
    """Quantize weights per tensor (max-abs / 127) and calibrate activation
    scales as max-abs over the calibration set of each compute layer's tap
    (post-ReLU where a ReLU follows)."""
    if len(calibration) == 0:
        raise ValueError("calibration set is empty")
    x = calibration.features.reshape((-1,) + tuple(fm.input_shape))
    acts = fm.activations(x)
    layers = list(fm.layers)

    in_scale = tensor_scale(x)
    net_in_scale = in_scale
    qlayers = []
    for pos, layer in enumerate(layers):
        if isinstance(layer, (FloatDense, FloatConv2D)):
            tap = pos + 1 if pos + 1 < len(layers) and isinstance(layers[pos + 1], ReLU) else pos
            out_scale = tensor_scale(acts[tap])
            w_scale = tensor_scale(layer.weight)
            qw = quantize_tensor(layer.weight, w_scale)
            qb = round_half_away(np.asarray(layer.bias) / (in_scale * w_scale))
            qb = np.clip(qb, -(2**31), 2**31 - 1).astype(np.int64)
            if isinstance(layer, FloatDense):
                qlayers.append(Dense(qw, qb, w_scale, out_scale))
            else:
                qlayers.append(Conv2D(qw, qb, w_scale, out_scale, layer.stride, layer.padding))
            in_scale = out_scale
        elif isinstance(layer, (ReLU, MaxPool2D, Flatten)):
            qlayers.append(layer)
        else:
            raise TypeError(f"cannot quantize layer {layer!r}")
    meta = {k: v for k, v in fm.metadata.items()}
    meta["calibration"] = "max-abs"
    return QNetwork(tuple(qlayers), tuple(fm.input_shape), net_in_scale, fm.class_count, name=fm.name, metadata=meta)
