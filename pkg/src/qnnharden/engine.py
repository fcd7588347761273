"""Deterministic int8 inference with per-neuron tap hooks.

All entry points work on batches: activations are int8 arrays whose leading
axis is the sample. A *hook* is a callable ``hook(layer, values) -> values``
invoked at every compute layer's tap with the tap values reshaped to
``[B, units]``; whatever it returns is what downstream layers consume.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Union

import numpy as np

from . import kernels
from ._kernels_py import conv2d_acc, dense_acc, requantize
from .network import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    NeuronId,
    QNetwork,
    QTensor,
    ReLU,
    ShapeError,
    TapRecord,
)

Hook = Callable[[int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray  # int32 [N]
    predicted_class: int


@dataclass(frozen=True)
class GateResult:
    loss: float
    grad: float
    grad_nonzero: bool


def quantize_input(net: QNetwork, x) -> np.ndarray:
    """Quantize real-valued inputs (one sample or a batch) with the network's input scale."""
    x = np.asarray(x, dtype=np.float64)
    q = np.clip(kernels.round_half_away(x / net.input_scale), -128, 127)
    return q.astype(np.int8)


def as_batch(net: QNetwork, x) -> np.ndarray:
    """Coerce a QTensor / int8 array (single sample or batch) to an int8 batch."""
    if isinstance(x, QTensor):
        data = x.data
    else:
        data = np.asarray(x)
        if data.dtype != np.int8:
            if data.size and (data.min() < -128 or data.max() > 127):
                raise ValueError("input values outside int8 range")
            data = data.astype(np.int8)
    if data.shape == net.input_shape:
        data = data[None]
    if data.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {data.shape[1:]} does not match network input {net.input_shape}")
    return np.ascontiguousarray(data)


def apply_layer(net: QNetwork, pos: int, x: np.ndarray) -> np.ndarray:
    layer = net.layers[pos]
    if isinstance(layer, Dense):
        return kernels.dense(x, layer.weight, layer.bias, net.multiplier(pos), layer.modes)
    if isinstance(layer, Conv2D):
        return kernels.conv2d(
            x, layer.weight, layer.bias, net.multiplier(pos), layer.modes, layer.stride, layer.padding
        )
    if isinstance(layer, ReLU):
        return np.maximum(x, 0).astype(np.int8)
    if isinstance(layer, MaxPool2D):
        return kernels.maxpool2d(x, layer.window, layer.stride)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    raise TypeError(f"unknown layer {layer!r}")


def run(net: QNetwork, x: np.ndarray, start: int = 0, hook: Optional[Hook] = None, trace: Optional[list] = None):
    """Run ``layers[start:]`` on ``x`` (the input of layer ``start``); return the final tap."""
    for pos in range(start, len(net.layers)):
        x = apply_layer(net, pos, x)
        owner = net.tap_owner.get(pos)
        if owner is not None and hook is not None:
            b = x.shape[0]
            x = np.ascontiguousarray(hook(owner, x.reshape(b, -1)), dtype=np.int8).reshape(x.shape)
        if trace is not None:
            trace.append(x)
    return x


def readout(net: QNetwork, final: np.ndarray) -> np.ndarray:
    final = final.reshape(final.shape[0], -1).astype(np.int32)
    if net.readout is None:
        return final
    return final @ net.readout.T


def logits_batch(net: QNetwork, x, hook: Optional[Hook] = None) -> np.ndarray:
    return readout(net, run(net, as_batch(net, x), hook=hook))


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits, axis=-1)


def forward(net: QNetwork, x) -> ForwardResult:
    logits = logits_batch(net, x)
    if logits.shape[0] != 1:
        raise ShapeError("forward takes a single sample; use forward_batch")
    return ForwardResult(logits[0], int(predict(logits[0])))


def forward_batch(net: QNetwork, x, hook: Optional[Hook] = None):
    logits = logits_batch(net, x, hook)
    return logits, predict(logits)


def _override_map(net: QNetwork, overrides) -> dict:
    if overrides is None:
        return {}
    if isinstance(overrides, Mapping):
        items = overrides.items()
    else:
        items = []
        for rec in overrides:
            if not isinstance(rec, TapRecord):
                raise TypeError("overrides must be TapRecords or a {NeuronId: value} mapping")
            if rec.override is not None:
                items.append((rec.neuron, rec.override))
    per_layer: dict = {}
    for neuron, value in items:
        nid = net.check_neuron(neuron)
        if not -128 <= int(value) <= 127:
            raise ValueError(f"override {value} outside int8 range")
        per_layer.setdefault(nid.layer, {})[nid.unit] = int(value)
    return per_layer


def forward_with_taps(net: QNetwork, x, overrides: Union[Iterable[TapRecord], Mapping, None] = None):
    """Single-sample forward pass with output overrides.

    Returns ``(ForwardResult, taps)`` where ``taps`` maps every compute layer
    to the values it computed, before any override was applied.
    """
    per_layer = _override_map(net, overrides)
    batch = as_batch(net, x)
    if batch.shape[0] != 1:
        raise ShapeError("forward_with_taps takes a single sample")
    taps = {}

    def hook(layer, values):
        taps[layer] = values[0].copy()
        sub = per_layer.get(layer)
        if not sub:
            return values
        values = values.copy()
        for unit, v in sub.items():
            values[0, unit] = v
        return values

    logits = readout(net, run(net, batch, hook=hook))
    return ForwardResult(logits[0], int(predict(logits[0]))), taps


def trace(net: QNetwork, x) -> list:
    """Outputs of every layer position for a batch (fault-free)."""
    acts: list = []
    run(net, as_batch(net, x), trace=acts)
    return acts


# --- gradient gate ----------------------------------------------------------


def _maxpool_backward(inp: np.ndarray, grad: np.ndarray, window: int, stride: int) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view

    b, c, h, w = inp.shape
    win = sliding_window_view(inp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2:4]
    arg = win.reshape(b, c, oh, ow, -1).argmax(axis=-1)  # first max in row-major window order
    rows = np.arange(oh)[None, None, :, None] * stride + arg // window
    cols = np.arange(ow)[None, None, None, :] * stride + arg % window
    out = np.zeros(inp.shape, dtype=np.float64)
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(out, (bi, ci, rows, cols), grad)
    return out


def _conv_backward(grad: np.ndarray, layer: Conv2D, in_shape) -> np.ndarray:
    b, o, oh, ow = grad.shape
    c, h, w = in_shape
    p, s = layer.padding, layer.stride
    kh, kw = layer.weight.shape[2:]
    wf = layer.weight.astype(np.float64)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p))
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("bohw,oc->bchw", grad, wf[:, :, i, j])
            out[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += contrib
    return out[:, :, p : p + h, p : p + w]


def backprop_directions(net: QNetwork, x, acts: Optional[list] = None, golden=None) -> dict:
    """Integer-weight backpropagation of the loss direction to every tap.

    The loss is ``sigmoid(sum_j(E_t - E_j))`` on dequantized logits, with
    ``t`` the golden class. Its gradient with respect to a neuron's
    dequantized output is ``sigmoid'(S) * prod(weight scales downstream) *
    direction``; every factor but ``direction`` is strictly positive, so
    ``direction`` alone decides the nonzero test and it is computed here with
    raw int8 weights in float64 (exact for small networks). ReLU masks and
    max-pool routing come from the quantized forward pass; requantization is
    passed straight through.

    Returns ``{layer: [B, units] float64}``.
    """
    batch = as_batch(net, x)
    if acts is None:
        acts = trace(net, batch)
    logits = readout(net, acts[-1])
    if golden is None:
        golden = predict(logits)
    n = net.class_count
    b = batch.shape[0]
    d = -np.ones((b, n))
    d[np.arange(b), golden] += n
    g = (d @ net.readout_matrix().astype(np.float64)).reshape(acts[-1].shape)

    grads = {}
    for pos in range(len(net.layers) - 1, -1, -1):
        owner = net.tap_owner.get(pos)
        if owner is not None:
            grads[owner] = g.reshape(b, -1).copy()
        layer = net.layers[pos]
        inp = acts[pos - 1] if pos > 0 else batch
        if isinstance(layer, ReLU):
            g = g * (inp > 0)
        elif isinstance(layer, MaxPool2D):
            g = _maxpool_backward(inp, g, layer.window, layer.stride)
        elif isinstance(layer, Flatten):
            g = g.reshape(inp.shape)
        elif isinstance(layer, Dense):
            g = g @ layer.weight.astype(np.float64)
        elif isinstance(layer, Conv2D):
            g = _conv_backward(g, layer, net.input_shape_of(pos))
    return grads


def downstream_scale(net: QNetwork, layer: int) -> float:
    """Product of the weight scales of compute layers after ``layer``."""
    s = 1.0
    for pos in net.compute_layers:
        if pos > layer:
            s *= net.layers[pos].weight_scale
    return s


def loss_value(net: QNetwork, logits: np.ndarray, golden: int):
    """Return ``(L, dL/dS)`` for one sample, computed without overflow."""
    e = logits.astype(np.float64) * net.logit_scale()
    s = float(np.sum(e[golden] - e))
    z = np.exp(-abs(s))
    loss = 1.0 / (1.0 + z) if s >= 0 else z / (1.0 + z)
    return loss, z / (1.0 + z) ** 2


def loss_and_gradient_gate(net: QNetwork, x, neuron) -> GateResult:
    nid = net.check_neuron(neuron)
    batch = as_batch(net, x)
    if batch.shape[0] != 1:
        raise ShapeError("loss_and_gradient_gate takes a single sample")
    acts = trace(net, batch)
    logits = readout(net, acts[-1])[0]
    golden = int(predict(logits))
    loss, dloss = loss_value(net, logits, golden)
    direction = backprop_directions(net, batch, acts, [golden])[nid.layer][0, nid.unit]
    grad = dloss * downstream_scale(net, nid.layer) * direction
    return GateResult(float(loss), float(grad), bool(direction != 0))


# --- interval bounds --------------------------------------------------------


def _interval_layer(net: QNetwork, pos: int, lo: np.ndarray, hi: np.ndarray):
    layer = net.layers[pos]
    if isinstance(layer, (Dense, Conv2D)):
        wpos = np.maximum(layer.weight, 0)
        wneg = np.minimum(layer.weight, 0)
        zero = np.zeros_like(layer.bias)
        if isinstance(layer, Dense):
            acc_lo = dense_acc(lo, wpos, layer.bias) + dense_acc(hi, wneg, zero)
            acc_hi = dense_acc(hi, wpos, layer.bias) + dense_acc(lo, wneg, zero)
        else:
            st, pd = layer.stride, layer.padding
            acc_lo = conv2d_acc(lo, wpos, layer.bias, st, pd) + conv2d_acc(hi, wneg, zero, st, pd)
            acc_hi = conv2d_acc(hi, wpos, layer.bias, st, pd) + conv2d_acc(lo, wneg, zero, st, pd)
        m = net.multiplier(pos)
        return requantize(acc_lo, m, layer.modes), requantize(acc_hi, m, layer.modes)
    return apply_layer(net, pos, lo), apply_layer(net, pos, hi)


def logit_bounds(net: QNetwork, start: int, lo: np.ndarray, hi: np.ndarray):
    """Sound elementwise logit bounds when the input of layer ``start`` lies in ``[lo, hi]``.

    Every operation is monotone (requantization, ReLU, max-pool, clamping) or
    affine with a sign-split weight, so the bounds are exact for point
    intervals.
    """
    for pos in range(start, len(net.layers)):
        lo, hi = _interval_layer(net, pos, lo, hi)
    return readout(net, lo), readout(net, hi)


def certified_class(lo_logits: np.ndarray, hi_logits: np.ndarray, cls: np.ndarray) -> np.ndarray:
    """True where class ``cls`` wins (with lowest-index tie-break) for every point in the box."""
    b, n = lo_logits.shape
    own = lo_logits[np.arange(b), cls][:, None]
    idx = np.arange(n)[None, :]
    beats = np.where(idx < cls[:, None], own > hi_logits, own >= hi_logits)
    beats[np.arange(b), cls] = True
    return beats.all(axis=1)
