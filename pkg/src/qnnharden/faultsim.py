"""Single bit-flip faults in neuron outputs, with LCU / TMR correction.

A fault XOR-flips one bit of one neuron's post-activation byte and persists
for every input of a run. Right after the faulted layer computes, and before
anything downstream reads it, every replica group of that layer is corrected
(LCU over a split pair, bitwise vote over a TMR triple) and the corrected
value is written back to all group members.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine
from .network import NeuronId, QNetwork
from .transform import SPLIT, TMR, ProtectedNetwork, ProtectionPlan, lcu_correct, tmr_vote

UNPROTECTED = "unprotected"
SPLIT_LCU = "split_lcu"
TMR_VOTE = "tmr"


@dataclass(frozen=True)
class FaultSpec:
    neuron: NeuronId
    bit: int

    def __post_init__(self):
        if not 0 <= self.bit <= 7:
            raise ValueError("bit must lie in [0, 7]")
        object.__setattr__(self, "neuron", NeuronId(*self.neuron))


@dataclass(frozen=True, eq=False)
class VariantUnderTest:
    kind: str
    net: QNetwork
    plan: Optional[ProtectionPlan] = None
    groups: dict = field(init=False, repr=False)

    def __post_init__(self):
        expected = {UNPROTECTED: None, SPLIT_LCU: SPLIT, TMR_VOTE: TMR}
        if self.kind not in expected:
            raise ValueError(f"unknown variant kind {self.kind!r}")
        mode = self.plan.mode if self.plan is not None and len(self.plan) else None
        if mode is not None and mode != expected[self.kind]:
            raise ValueError(f"plan mode {mode} does not match variant {self.kind}")
        if self.kind == UNPROTECTED and mode is not None:
            raise ValueError("unprotected variant cannot carry a plan")
        groups = self.plan.layer_groups() if self.plan is not None else {}
        for layer, g in groups.items():
            if g.size and g.max() >= self.net.units(layer):
                raise ValueError(f"plan refers to units outside layer {layer}")
        object.__setattr__(self, "groups", groups)

    @classmethod
    def unprotected(cls, net: QNetwork):
        return cls(UNPROTECTED, net)

    @classmethod
    def from_protected(cls, pn: ProtectedNetwork):
        return cls(SPLIT_LCU if pn.plan.mode == SPLIT else TMR_VOTE, pn.net, pn.plan)

    @property
    def neuron_count(self) -> int:
        return self.net.neuron_count

    @property
    def fault_space(self) -> int:
        return self.net.neuron_count * 8

    def fault_at(self, index: int) -> FaultSpec:
        """Fault number ``index`` in (layer, unit, bit) order."""
        if not 0 <= index < self.fault_space:
            raise IndexError(index)
        neuron, bit = divmod(index, 8)
        for layer in self.net.compute_layers:
            n = self.net.units(layer)
            if neuron < n:
                return FaultSpec(NeuronId(layer, neuron), bit)
            neuron -= n
        raise IndexError(index)


def flip_bits(values: np.ndarray, bit: int) -> np.ndarray:
    """XOR one bit of int8 values."""
    return (np.asarray(values, dtype=np.int8).view(np.uint8) ^ np.uint8(1 << bit)).view(np.int8)


def correct_layer(variant: VariantUnderTest, layer: int, values: np.ndarray) -> np.ndarray:
    """Apply the variant's correction to every replica group of ``layer`` (``[B, units]``)."""
    g = variant.groups.get(layer)
    if g is None or not len(g):
        return values
    values = values.copy()
    if variant.kind == SPLIT_LCU:
        fixed = lcu_correct(values[:, g[:, 0]], values[:, g[:, 1]])
    else:
        fixed = tmr_vote(values[:, g[:, 0]], values[:, g[:, 1]], values[:, g[:, 2]])
    for j in range(g.shape[1]):
        values[:, g[:, j]] = fixed
    return values


def _check_fault(variant: VariantUnderTest, fault: FaultSpec) -> FaultSpec:
    if not isinstance(fault, FaultSpec):
        raise TypeError("fault must be a FaultSpec")
    variant.net.check_neuron(fault.neuron)
    return fault


def _fault_hook(variant: VariantUnderTest, fault: FaultSpec):
    def hook(layer, values):
        if layer != fault.neuron.layer:
            return values
        values = values.copy()
        values[:, fault.neuron.unit] = flip_bits(values[:, fault.neuron.unit], fault.bit)
        return correct_layer(variant, layer, values)

    return hook


def infer_with_fault_batch(variant: VariantUnderTest, x, fault: Optional[FaultSpec]) -> np.ndarray:
    hook = None if fault is None else _fault_hook(variant, _check_fault(variant, fault))
    _, pred = engine.forward_batch(variant.net, x, hook=hook)
    return pred


def infer_with_fault(variant: VariantUnderTest, x, fault: Optional[FaultSpec] = None) -> int:
    pred = infer_with_fault_batch(variant, x, fault)
    if len(pred) != 1:
        raise ValueError("infer_with_fault takes a single sample")
    return int(pred[0])


@dataclass(frozen=True)
class FaultOutcome:
    accuracy: float
    per_input_flips: int
    correct: int


class FaultEvaluator:
    """Evaluates many faults of one variant on a fixed labelled input batch.

    Fault-free taps are computed once; each fault replays only the layers
    after the faulted one.
    """

    def __init__(self, variant: VariantUnderTest, x: np.ndarray, labels: np.ndarray):
        if len(x) == 0:
            raise ValueError("dataset is empty")
        self.variant = variant
        self.x = engine.as_batch(variant.net, x)
        self.labels = np.asarray(labels)
        self.acts = engine.trace(variant.net, self.x)
        self.golden = engine.predict(engine.readout(variant.net, self.acts[-1]))
        self.baseline_correct = int(np.sum(self.golden == self.labels))

    def evaluate_counts(self, fault: FaultSpec):
        net = self.variant.net
        fault = _check_fault(self.variant, fault)
        layer, unit = fault.neuron
        pos = net.tap_position[layer]
        taps = self.acts[pos].reshape(len(self.x), -1).copy()
        taps[:, unit] = flip_bits(taps[:, unit], fault.bit)
        taps = correct_layer(self.variant, layer, taps)
        final = engine.run(net, taps.reshape(self.acts[pos].shape), start=pos + 1)
        pred = engine.predict(engine.readout(net, final))
        return int(np.sum(pred == self.labels)), int(np.sum(pred != self.golden))

    def evaluate(self, fault: FaultSpec) -> FaultOutcome:
        correct, flips = self.evaluate_counts(fault)
        return FaultOutcome(correct / len(self.x), flips, correct)


def evaluate_fault(variant: VariantUnderTest, dataset, fault: FaultSpec) -> FaultOutcome:
    """Accuracy of ``variant`` on ``dataset`` under ``fault``, and the number of
    inputs whose prediction leaves the fault-free (golden) one."""
    from .analysis import analysis_inputs

    x = analysis_inputs(variant.net, dataset)
    return FaultEvaluator(variant, x, dataset.labels).evaluate(fault)
