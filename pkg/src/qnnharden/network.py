"""Containers for int8 quantized networks.

A network is an ordered list of layers (``Dense``, ``Conv2D``, ``ReLU``,
``MaxPool2D``, ``Flatten``) with per-tensor symmetric scales. Activations are
int8 with zero point 0; a real value is ``scale * int``.

Dense and Conv2D layers are the *compute* layers. Their output activations are
the neurons that can be analysed, protected and attacked. A neuron's value is
read at the layer's tap: after the directly-following ReLU if there is one,
otherwise right after requantization.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

INT8_MIN = -128
INT8_MAX = 127
ACC_LIMIT = 2**31 - 1

# Per-unit output modes of a compute layer.
MODE_FULL = 0  # clamp(round(y), -128, 127)
MODE_EVEN = 1  # 2 * clamp(round(y / 2), -64, 63); evenized neuron, equals the sum of its two halves
MODE_HALF = 2  # clamp(round(y), -64, 63); one split replica


class ShapeError(ValueError):
    pass


class NeuronId(NamedTuple):
    """Address of one output activation of a compute layer.

    ``unit`` is the flat index into the layer output; for Conv2D it is
    ``channel * H * W + row * W + col``.
    """

    layer: int
    unit: int


@dataclass(frozen=True)
class QTensor:
    data: np.ndarray
    scale: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.int8:
            if data.size and (data.min() < INT8_MIN or data.max() > INT8_MAX):
                raise ValueError("QTensor values outside int8 range")
            data = data.astype(np.int8)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def shape(self):
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale


@dataclass(frozen=True)
class TapRecord:
    neuron: NeuronId
    observed_value: int = 0
    override: Optional[int] = None

    def __post_init__(self):
        if self.override is not None and not INT8_MIN <= self.override <= INT8_MAX:
            raise ValueError(f"override {self.override} outside int8 range")


def _int_array(a, dtype, name, lo=None, hi=None) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind not in "iu":
        if a.size and not np.all(np.equal(np.mod(a, 1), 0)):
            raise ValueError(f"{name} must hold integers")
    if a.size and lo is not None and (a.min() < lo or a.max() > hi):
        raise ValueError(f"{name} outside [{lo}, {hi}]")
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray  # int8 [out, in]
    bias: np.ndarray  # int32 [out]
    weight_scale: float
    output_scale: float
    modes: Optional[np.ndarray] = None  # uint8 [out]

    kind = "dense"

    def __post_init__(self):
        w = _int_array(self.weight, np.int8, "weight", INT8_MIN, INT8_MAX)
        if w.ndim != 2:
            raise ShapeError("dense weight must be 2-D [out, in]")
        b = _int_array(self.bias, np.int32, "bias", -ACC_LIMIT - 1, ACC_LIMIT)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias length {b.shape} != out units {w.shape[0]}")
        modes = np.zeros(w.shape[0], np.uint8) if self.modes is None else self.modes
        modes = _int_array(modes, np.uint8, "modes", 0, 2)
        if modes.shape != (w.shape[0],):
            raise ShapeError("modes length must equal out units")
        if not (self.weight_scale > 0 and self.output_scale > 0):
            raise ValueError("scales must be positive")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "weight_scale", float(self.weight_scale))
        object.__setattr__(self, "output_scale", float(self.output_scale))

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.weight.shape[1],):
            raise ShapeError(f"dense expects input ({self.weight.shape[1]},), got {tuple(in_shape)}")
        return (self.weight.shape[0],)


@dataclass(frozen=True, eq=False)
class Conv2D:
    weight: np.ndarray  # int8 [out_c, in_c, kh, kw]
    bias: np.ndarray  # int32 [out_c]
    weight_scale: float
    output_scale: float
    stride: int = 1
    padding: int = 0
    modes: Optional[np.ndarray] = None  # uint8 [out_c]

    kind = "conv2d"

    def __post_init__(self):
        w = _int_array(self.weight, np.int8, "weight", INT8_MIN, INT8_MAX)
        if w.ndim != 4:
            raise ShapeError("conv weight must be 4-D [out_c, in_c, kh, kw]")
        b = _int_array(self.bias, np.int32, "bias", -ACC_LIMIT - 1, ACC_LIMIT)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias length {b.shape} != out channels {w.shape[0]}")
        modes = np.zeros(w.shape[0], np.uint8) if self.modes is None else self.modes
        modes = _int_array(modes, np.uint8, "modes", 0, 2)
        if modes.shape != (w.shape[0],):
            raise ShapeError("modes length must equal out channels")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        if not (self.weight_scale > 0 and self.output_scale > 0):
            raise ValueError("scales must be positive")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "weight_scale", float(self.weight_scale))
        object.__setattr__(self, "output_scale", float(self.output_scale))

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise ShapeError(f"conv expects ({self.weight.shape[1]}, H, W), got {tuple(in_shape)}")
        _, kh, kw = self.weight.shape[1:]
        h = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
        w = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
        if h < 1 or w < 1:
            raise ShapeError("conv kernel larger than padded input")
        return (self.weight.shape[0], h, w)


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)


@dataclass(frozen=True)
class MaxPool2D:
    window: int = 2
    stride: int = 2

    kind = "maxpool2d"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError("maxpool expects (C, H, W)")
        c, h, w = in_shape
        oh = (h - self.window) // self.stride + 1
        ow = (w - self.window) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError("pool window larger than input")
        return (c, oh, ow)


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


COMPUTE_KINDS = (Dense, Conv2D)


@dataclass(frozen=True, eq=False)
class QNetwork:
    """An immutable int8 network.

    ``readout`` is an optional nonnegative integer matrix ``[class_count,
    final_units]`` mapping the last compute layer's tap to logits. It is the
    identity for ordinary networks; protection transforms extend it so that
    replicas of an output neuron feed the same logit.
    """

    layers: tuple
    input_shape: tuple
    input_scale: float
    class_count: int
    readout: Optional[np.ndarray] = None
    name: str = "qnet"
    metadata: dict = field(default_factory=dict)

    shapes: tuple = field(init=False, repr=False)
    scales: tuple = field(init=False, repr=False)
    tap_position: dict = field(init=False, repr=False)
    tap_owner: dict = field(init=False, repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "input_scale", float(self.input_scale))
        if not self.input_scale > 0:
            raise ValueError("input_scale must be positive")
        if not layers:
            raise ShapeError("network has no layers")

        shapes, scales = [], []
        shape, scale = self.input_shape, self.input_scale
        for pos, layer in enumerate(layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layers[{pos}]: {exc}") from None
            if isinstance(layer, COMPUTE_KINDS):
                fan_in = int(np.prod(layer.weight.shape[1:]))
                bound = fan_in * 128 * 128 + int(np.abs(layer.bias.astype(np.int64)).max(initial=0))
                if bound > ACC_LIMIT:
                    raise ValueError(f"layers[{pos}]: accumulator may exceed 32 bits")
                scale = layer.output_scale
            shapes.append(tuple(shape))
            scales.append(scale)
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "scales", tuple(scales))

        taps = {}
        for pos, layer in enumerate(layers):
            if isinstance(layer, COMPUTE_KINDS):
                nxt = layers[pos + 1] if pos + 1 < len(layers) else None
                taps[pos] = pos + 1 if isinstance(nxt, ReLU) else pos
        if not taps:
            raise ShapeError("network has no compute layer")
        object.__setattr__(self, "tap_position", taps)
        object.__setattr__(self, "tap_owner", {p: i for i, p in taps.items()})

        last = max(taps)
        if taps[last] != len(layers) - 1:
            raise ShapeError("network must end with a Dense layer (optionally followed by ReLU)")
        final_units = int(np.prod(shapes[-1]))
        if self.readout is None:
            if final_units != self.class_count:
                raise ShapeError(f"final layer yields {final_units} outputs, expected {self.class_count}")
            readout = None
        else:
            readout = _int_array(self.readout, np.int32, "readout", 0, ACC_LIMIT)
            if readout.shape != (self.class_count, final_units):
                raise ShapeError(f"readout must be {(self.class_count, final_units)}, got {readout.shape}")
        object.__setattr__(self, "readout", readout)

    # --- neuron addressing -------------------------------------------------

    @property
    def compute_layers(self) -> list:
        return sorted(self.tap_position)

    @property
    def final_layer(self) -> int:
        return max(self.tap_position)

    def units(self, layer: int) -> int:
        self._check_compute(layer)
        return int(np.prod(self.shapes[layer]))

    def spatial(self, layer: int) -> int:
        """Activations per output channel (1 for Dense)."""
        self._check_compute(layer)
        return int(np.prod(self.shapes[layer][1:])) if len(self.shapes[layer]) == 3 else 1

    def channel_of(self, neuron: NeuronId) -> int:
        return neuron.unit // self.spatial(neuron.layer)

    @property
    def neuron_count(self) -> int:
        return sum(self.units(i) for i in self.tap_position)

    def neurons(self) -> Iterator[NeuronId]:
        for i in self.compute_layers:
            for u in range(self.units(i)):
                yield NeuronId(i, u)

    def check_neuron(self, neuron) -> NeuronId:
        layer, unit = neuron
        if layer not in self.tap_position:
            raise ValueError(f"layer {layer} is not a Dense/Conv2D layer")
        if not 0 <= unit < self.units(layer):
            raise ValueError(f"unit {unit} out of range for layer {layer}")
        return NeuronId(int(layer), int(unit))

    def _check_compute(self, layer):
        if layer not in self.tap_position:
            raise ValueError(f"layer {layer} is not a Dense/Conv2D layer")

    def input_scale_of(self, pos: int) -> float:
        return self.input_scale if pos == 0 else self.scales[pos - 1]

    def input_shape_of(self, pos: int) -> tuple:
        return self.input_shape if pos == 0 else self.shapes[pos - 1]

    def multiplier(self, pos: int) -> float:
        """Real requantization multiplier ``s_in * s_w / s_out`` of a compute layer."""
        layer = self.layers[pos]
        return self.input_scale_of(pos) * layer.weight_scale / layer.output_scale

    def logit_scale(self) -> float:
        return self.scales[-1]

    def readout_matrix(self) -> np.ndarray:
        if self.readout is None:
            return np.eye(self.class_count, dtype=np.int32)
        return self.readout

    def replace_layers(self, layers: Sequence, readout=None, **kw) -> "QNetwork":
        return QNetwork(
            layers=tuple(layers),
            input_shape=self.input_shape,
            input_scale=self.input_scale,
            class_count=self.class_count,
            readout=readout if readout is not None else self.readout,
            name=kw.get("name", self.name),
            metadata=dict(kw.get("metadata", self.metadata)),
        )

    def digest(self) -> str:
        """Content hash of parameters and scales; stable across runs."""
        h = hashlib.sha256()
        h.update(repr((self.input_shape, self.input_scale.hex(), self.class_count)).encode())
        for layer in self.layers:
            h.update(layer.kind.encode())
            if isinstance(layer, COMPUTE_KINDS):
                for arr in (layer.weight, layer.bias, layer.modes):
                    h.update(repr(arr.shape).encode())
                    h.update(arr.tobytes())
                h.update(layer.weight_scale.hex().encode() + layer.output_scale.hex().encode())
                if isinstance(layer, Conv2D):
                    h.update(repr((layer.stride, layer.padding)).encode())
            elif isinstance(layer, MaxPool2D):
                h.update(repr((layer.window, layer.stride)).encode())
        if self.readout is not None:
            h.update(self.readout.tobytes())
        return h.hexdigest()[:16]
