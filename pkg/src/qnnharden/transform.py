"""Hardening transforms: neuron splitting and selective triplication.

Replicas are appended after the existing units of a layer, so unprotected
neurons keep their indices. A Conv2D layer is protected per output channel:
any critical activation protects its whole channel, and the plan records one
replica group per activation.

Splitting needs exact halves. ``evenize`` makes a neuron's weights and bias
even and puts its output on the even grid (``2 * round(y / 2)``); a split
replica then computes exactly half of that output (range [-64, 63]) and the
two replicas sum to the evenized original bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .network import (
    MODE_EVEN,
    MODE_HALF,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    NeuronId,
    QNetwork,
    ReLU,
)

SPLIT = "split"
TMR = "tmr"

_BIT6 = np.int8(0x40)


class OddParameterError(ValueError):
    pass


@dataclass(frozen=True)
class ReplicaGroup:
    original: NeuronId
    replicas: tuple

    def __post_init__(self):
        if len({r.layer for r in self.replicas}) != 1:
            raise ValueError("replicas must lie in the same layer")


@dataclass(frozen=True)
class ProtectionPlan:
    mode: str
    groups: tuple = ()

    def __post_init__(self):
        if self.mode not in (SPLIT, TMR):
            raise ValueError(f"unknown protection mode {self.mode!r}")
        size = 2 if self.mode == SPLIT else 3
        seen = set()
        for g in self.groups:
            if len(g.replicas) != size:
                raise ValueError(f"{self.mode} groups need {size} replicas")
            for r in g.replicas:
                if r in seen:
                    raise ValueError(f"replica {r} appears in more than one group")
                seen.add(r)

    def __len__(self):
        return len(self.groups)

    def layer_groups(self) -> dict:
        """``{layer: int array [G, replicas]}`` of replica unit indices."""
        out: dict = {}
        for g in self.groups:
            out.setdefault(g.replicas[0].layer, []).append([r.unit for r in g.replicas])
        return {k: np.array(v, dtype=np.int64) for k, v in sorted(out.items())}


@dataclass(frozen=True)
class ProtectedNetwork:
    net: QNetwork
    plan: ProtectionPlan
    source_ref: str

    @property
    def added_neurons(self) -> int:
        return (len(self.plan.groups[0].replicas) - 1) * len(self.plan) if len(self.plan) else 0


# --- correction primitives ------------------------------------------------------


def lcu_correct(y1, y2):
    """Bitwise AND of two split replicas, then clear bit 6 (the integer MSB).

    Works elementwise on int8 arrays or on Python ints.
    """
    a = np.asarray(y1, dtype=np.int8)
    b = np.asarray(y2, dtype=np.int8)
    out = (a & b) & ~_BIT6
    return int(out) if out.ndim == 0 else out


def tmr_vote(y1, y2, y3):
    """Bitwise majority of three replicas."""
    a = np.asarray(y1, dtype=np.int8)
    b = np.asarray(y2, dtype=np.int8)
    c = np.asarray(y3, dtype=np.int8)
    out = (a & b) | (a & c) | (b & c)
    return int(out) if out.ndim == 0 else out


# --- helpers ------------------------------------------------------------------------


def _channels(net: QNetwork, neurons: Iterable) -> dict:
    """Group neurons into ``{layer: sorted channel list}``."""
    out: dict = {}
    for n in neurons:
        nid = net.check_neuron(n)
        out.setdefault(nid.layer, set()).add(net.channel_of(nid))
    return {k: sorted(v) for k, v in sorted(out.items())}


def _even_toward_zero(a: np.ndarray) -> np.ndarray:
    a = a.astype(np.int64)
    return np.where(a % 2 == 0, a, a - np.sign(a))


def _with(layer, **changes):
    fields = dict(weight=layer.weight, bias=layer.bias, weight_scale=layer.weight_scale,
                  output_scale=layer.output_scale, modes=layer.modes)
    if isinstance(layer, Conv2D):
        fields.update(stride=layer.stride, padding=layer.padding)
    fields.update(changes)
    return type(layer)(**fields)


def _consumer(net: QNetwork, layer: int):
    """Next compute layer after ``layer`` (None for the final layer)."""
    for pos in range(layer + 1, len(net.layers)):
        lyr = net.layers[pos]
        if isinstance(lyr, (Dense, Conv2D)):
            return pos
        if not isinstance(lyr, (ReLU, MaxPool2D, Flatten)):
            raise TypeError(f"unsupported layer between compute layers: {lyr!r}")
    return None


def evenize(net: QNetwork, neurons) -> QNetwork:
    """Round the listed neurons' weights and bias to even integers (ties toward zero) and
    put their outputs on the even grid. Conv neurons are evenized per channel."""
    layers = list(net.layers)
    for layer, chans in _channels(net, neurons).items():
        lyr = layers[layer]
        w = lyr.weight.astype(np.int64).copy()
        b = lyr.bias.astype(np.int64).copy()
        modes = lyr.modes.copy()
        w[chans] = _even_toward_zero(w[chans])
        b[chans] = _even_toward_zero(b[chans])
        modes[chans] = MODE_EVEN
        layers[layer] = _with(lyr, weight=w, bias=b, modes=modes)
    return net.replace_layers(layers)


def _replicate(net: QNetwork, neurons, mode: str):
    per_layer = _channels(net, neurons)
    layers = list(net.layers)
    readout = net.readout_matrix().copy()
    groups = []
    copies = 1 if mode == SPLIT else 2
    for layer, chans in per_layer.items():
        lyr = layers[layer]
        old_c = lyr.channels
        spatial = net.spatial(layer)
        w = lyr.weight.astype(np.int64)
        b = lyr.bias.astype(np.int64)
        modes = lyr.modes.copy()
        if mode == SPLIT:
            if np.any(w[chans] % 2) or np.any(b[chans] % 2):
                bad = [c for c in chans if np.any(w[c] % 2) or b[c] % 2]
                raise OddParameterError(
                    f"layer {layer} channels {bad[:8]} have odd weights or bias; call evenize() first"
                )
            w = w.copy()
            b = b.copy()
            w[chans] //= 2
            b[chans] //= 2
            modes[chans] = MODE_HALF
        new_w = np.concatenate([w] + [w[chans]] * copies)
        new_b = np.concatenate([b] + [b[chans]] * copies)
        new_modes = np.concatenate([modes] + [modes[chans]] * copies)
        layers[layer] = _with(lyr, weight=new_w, bias=new_b, modes=new_modes)

        # downstream consumers see the replicas through duplicated (split) or zero (TMR) inputs
        consumer = _consumer(net, layer)
        if consumer is None:
            cols = np.concatenate([np.arange(c * spatial, (c + 1) * spatial) for c in chans])
            dup = readout[:, cols] if mode == SPLIT else np.zeros_like(readout[:, cols])
            readout = np.concatenate([readout] + [dup] * copies, axis=1)
        else:
            nxt = layers[consumer]
            nw = nxt.weight.astype(np.int64)
            if isinstance(nxt, Conv2D):
                dup = nw[:, chans] if mode == SPLIT else np.zeros_like(nw[:, chans])
                nw = np.concatenate([nw] + [dup] * copies, axis=1)
            else:
                # Dense consumer, possibly behind pooling/flatten: columns per channel block
                block = nw.shape[1] // old_c
                cols = np.concatenate([np.arange(c * block, (c + 1) * block) for c in chans])
                dup = nw[:, cols] if mode == SPLIT else np.zeros_like(nw[:, cols])
                nw = np.concatenate([nw] + [dup] * copies, axis=1)
            layers[consumer] = _with(nxt, weight=nw)

        for k, c in enumerate(chans):
            for s in range(spatial):
                orig = NeuronId(layer, c * spatial + s)
                reps = [orig] + [
                    NeuronId(layer, (old_c + j * len(chans) + k) * spatial + s) for j in range(copies)
                ]
                groups.append(ReplicaGroup(orig, tuple(reps)))

    final = net.final_layer
    grew_final = final in per_layer
    protected = net.replace_layers(layers, readout=readout if (grew_final or net.readout is not None) else None)
    return ProtectedNetwork(protected, ProtectionPlan(mode, tuple(groups)), net.digest())


def split_neurons(net: QNetwork, neurons) -> ProtectedNetwork:
    """Replace each target with two replicas carrying half its weights and bias.

    Targets must already be even (see ``evenize``). Each replica outputs in
    [-64, 63]; downstream weights are duplicated unchanged, so with evenized
    targets the protected network reproduces the source exactly.
    """
    return _replicate(net, neurons, SPLIT)


def triplicate_neurons(net: QNetwork, neurons) -> ProtectedNetwork:
    """Add two identical copies of each target. Downstream reads the first
    replica only, which holds the voted value at runtime."""
    return _replicate(net, neurons, TMR)
