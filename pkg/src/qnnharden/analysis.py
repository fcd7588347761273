"""Per-neuron vulnerability analysis of int8 networks.

For every neuron and every analysis input the golden class is taken from the
fault-free pass. Inputs where the loss gradient with respect to the neuron is
exactly zero are skipped. Otherwise the smallest positive and the closest-to-
zero negative perturbation ``delta`` that change the class are found, with the
faulty output ``clamp(observed + delta, -128, 127)``. Each bound is mapped to
the bit whose flip produces a perturbation of that size and counted; the
counters are folded into the neuron vulnerability factor (NVF), the
probability that a bit flip in the neuron's output misclassifies the input.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import engine
from .network import NeuronId, QNetwork

log = logging.getLogger(__name__)

BITS = 8
_VALUES = np.arange(-128, 128, dtype=np.int16)
_POS_DELTAS = np.arange(1, 128)
_NEG_DELTAS = -np.arange(1, 129)
# bit j (1-based) contributes to the cumulative sums of bits j..8
_BIT_WEIGHTS = np.arange(BITS, 0, -1, dtype=np.int64)


class BisectionMismatch(AssertionError):
    pass


@dataclass(frozen=True)
class BoundsResult:
    r_upper: Optional[int]
    r_lower: Optional[int]


@dataclass(frozen=True)
class VulnerabilityCounters:
    pos: tuple  # counts for bits 1..8
    neg: tuple
    inputs_seen: int

    def __post_init__(self):
        if len(self.pos) != BITS or len(self.neg) != BITS:
            raise ValueError("counters need exactly 8 entries per side")
        for c in self.pos + self.neg:
            if c < 0 or c > self.inputs_seen:
                raise ValueError(f"counter {c} outside [0, {self.inputs_seen}]")


@dataclass(frozen=True)
class NeuronVulnerability:
    counters: VulnerabilityCounters
    nvf: float


def bit_index(r: int, side: str = "positive", negative_offset: bool = True) -> int:
    """Map a misclassifying perturbation to a 1-based bit position.

    ``floor(log2(|r|)) + 1``, clamped to [1, 8]. With
    ``negative_offset=False`` the negative side omits the ``+ 1``.
    """
    r = int(r)
    if r == 0:
        raise ValueError("r must be nonzero")
    if side not in ("positive", "negative"):
        raise ValueError("side must be 'positive' or 'negative'")
    if abs(r) > 128:
        raise ValueError("r outside int8 magnitude range")
    bit = abs(r).bit_length()
    if side == "negative" and not negative_offset:
        bit -= 1
    return min(max(bit, 1), BITS)


def _bit_indices(r: np.ndarray, side: str, negative_offset: bool) -> np.ndarray:
    bits = np.floor(np.log2(np.abs(r))).astype(np.int64) + 1  # exact for integers <= 128
    if side == "negative" and not negative_offset:
        bits -= 1
    return np.clip(bits, 1, BITS)


def _nvf_from_arrays(pos: np.ndarray, neg: np.ndarray, inputs_seen: int) -> np.ndarray:
    # sum_i (1/8) sum_{j<=i} (pos_j + neg_j) / 2  ==  sum_j (9 - j) (pos_j + neg_j) / 16
    num = (pos.astype(np.int64) + neg) @ _BIT_WEIGHTS
    return num / (16.0 * inputs_seen)


def neuron_nvf(counters: VulnerabilityCounters) -> float:
    if counters.inputs_seen <= 0:
        raise ValueError("inputs_seen must be positive")
    pos = np.asarray(counters.pos, dtype=np.int64)
    neg = np.asarray(counters.neg, dtype=np.int64)
    return float(_nvf_from_arrays(pos[None], neg[None], counters.inputs_seen)[0])


@dataclass
class LayerVulnerability:
    pos: np.ndarray  # int64 [units, 8]
    neg: np.ndarray
    nvf: np.ndarray  # float64 [units]


class VulnerabilityProfile:
    """NVF and counters for every neuron of a network."""

    def __init__(self, layers: dict, inputs_seen: int, source_digest: str = ""):
        self.layers = dict(sorted(layers.items()))
        self.inputs_seen = int(inputs_seen)
        self.source_digest = source_digest

    @classmethod
    def from_counters(cls, counts: dict, inputs_seen: int, source_digest: str = ""):
        layers = {
            layer: LayerVulnerability(pos, neg, _nvf_from_arrays(pos, neg, inputs_seen))
            for layer, (pos, neg) in counts.items()
        }
        return cls(layers, inputs_seen, source_digest)

    def __getitem__(self, neuron) -> NeuronVulnerability:
        layer, unit = neuron
        lv = self.layers[layer]
        counters = VulnerabilityCounters(
            tuple(int(c) for c in lv.pos[unit]), tuple(int(c) for c in lv.neg[unit]), self.inputs_seen
        )
        return NeuronVulnerability(counters, float(lv.nvf[unit]))

    def __iter__(self) -> Iterator[NeuronId]:
        for layer, lv in self.layers.items():
            for unit in range(len(lv.nvf)):
                yield NeuronId(layer, unit)

    def __len__(self):
        return sum(len(lv.nvf) for lv in self.layers.values())

    def nvf(self, neuron) -> float:
        return float(self.layers[neuron[0]].nvf[neuron[1]])

    @property
    def max_nvf(self) -> float:
        return max((float(lv.nvf.max()) for lv in self.layers.values() if len(lv.nvf)), default=0.0)

    def same_counters(self, other: "VulnerabilityProfile") -> bool:
        if self.inputs_seen != other.inputs_seen or self.layers.keys() != other.layers.keys():
            return False
        return all(
            np.array_equal(a.pos, other.layers[k].pos) and np.array_equal(a.neg, other.layers[k].neg)
            for k, a in self.layers.items()
        )


def select_critical(profile: VulnerabilityProfile, threshold: float) -> list:
    """Neurons with NVF >= threshold, ordered by (layer, unit)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    out = []
    for layer, lv in profile.layers.items():
        out.extend(NeuronId(layer, int(u)) for u in np.flatnonzero(lv.nvf >= threshold))
    return out


# --- bounds -----------------------------------------------------------------


def _class_table(net: QNetwork, layer: int, taps: np.ndarray, unit: int, max_rows: int = 1 << 16) -> np.ndarray:
    """Predicted class for every candidate value of ``unit``: ``[B, 256]``, column ``v + 128``."""
    pos = net.tap_position[layer]
    shape = net.shapes[pos]
    b = taps.shape[0]
    out = np.empty((b, 256), dtype=np.int64)
    step = max(1, max_rows // 256)
    for s in range(0, b, step):
        chunk = taps[s : s + step]
        rows = np.repeat(chunk, 256, axis=0)
        rows[:, unit] = np.tile(_VALUES, len(chunk))
        final = engine.run(net, rows.reshape((-1,) + shape), start=pos + 1)
        out[s : s + step] = engine.predict(engine.readout(net, final)).reshape(len(chunk), 256)
    return out


def _bounds_from_table(table: np.ndarray, observed: np.ndarray, golden: np.ndarray):
    """Exhaustive delta scan over a class table; returns (r_upper, r_lower) with 0 for absent."""
    rows = np.arange(len(observed))[:, None]
    result = []
    for deltas in (_POS_DELTAS, _NEG_DELTAS):
        v = np.clip(observed[:, None].astype(np.int64) + deltas[None, :], -128, 127)
        mis = table[rows, v + 128] != golden[:, None]
        found = mis.any(axis=1)
        r = np.where(found, deltas[mis.argmax(axis=1)], 0)
        result.append(r)
    return result[0], result[1]


def _interval_search(net, layer, taps, unit, golden, deltas) -> np.ndarray:
    """First delta (in the given order) that misclassifies each row, or 0.

    Bisects the delta index range of all rows together, level by level, and
    discards every sub-range whose whole value interval is certified to keep
    the golden class by interval bounds. Bounds are exact on single values,
    so the result equals the full scan.
    """
    start = net.tap_position[layer] + 1
    shape = net.shapes[start - 1]
    obs = taps[:, unit].astype(np.int64)
    n = len(taps)
    best = np.full(n, len(deltas), dtype=np.int64)  # smallest misclassifying index so far
    row = np.arange(n)
    lo_i = np.zeros(n, dtype=np.int64)
    hi_i = np.full(n, len(deltas) - 1, dtype=np.int64)
    while len(row):
        va = np.clip(obs[row] + deltas[lo_i], -128, 127)
        vb = np.clip(obs[row] + deltas[hi_i], -128, 127)
        lo = taps[row].copy()
        hi = taps[row].copy()
        lo[:, unit] = np.minimum(va, vb)
        hi[:, unit] = np.maximum(va, vb)
        llo, lhi = engine.logit_bounds(net, start, lo.reshape((-1,) + shape), hi.reshape((-1,) + shape))
        keep = ~engine.certified_class(llo, lhi, golden[row])
        leaf = keep & (lo_i == hi_i)
        np.minimum.at(best, row[leaf], lo_i[leaf])
        keep &= ~leaf
        row, lo_i, hi_i = row[keep], lo_i[keep], hi_i[keep]
        keep = lo_i < best[row]  # nothing after a known hit can matter
        row, lo_i, hi_i = row[keep], lo_i[keep], hi_i[keep]
        mid = (lo_i + hi_i) // 2
        row = np.concatenate([row, row])
        lo_i, hi_i = np.concatenate([lo_i, mid + 1]), np.concatenate([mid, hi_i])
    return np.where(best < len(deltas), deltas[np.minimum(best, len(deltas) - 1)], 0)


def misclassification_bounds(net: QNetwork, x, neuron, *, bisect: bool = False, verify: bool = False) -> BoundsResult:
    nid = net.check_neuron(neuron)
    batch = engine.as_batch(net, x)
    if batch.shape[0] != 1:
        raise ValueError("misclassification_bounds takes a single sample")
    acts = engine.trace(net, batch)
    golden = engine.predict(engine.readout(net, acts[-1]))
    taps = acts[net.tap_position[nid.layer]].reshape(1, -1)
    up, lo = _layer_bounds(net, nid.layer, taps, nid.unit, golden, bisect, verify)
    return BoundsResult(int(up[0]) or None, int(lo[0]) or None)


def _layer_bounds(net, layer, taps, unit, golden, bisect, verify):
    if not bisect:
        table = _class_table(net, layer, taps, unit)
        return _bounds_from_table(table, taps[:, unit], golden)
    up = _interval_search(net, layer, taps, unit, golden, _POS_DELTAS)
    lo = _interval_search(net, layer, taps, unit, golden, _NEG_DELTAS)
    if verify:
        table = _class_table(net, layer, taps, unit)
        s_up, s_lo = _bounds_from_table(table, taps[:, unit], golden)
        if not (np.array_equal(up, s_up) and np.array_equal(lo, s_lo)):
            raise BisectionMismatch(f"bisection disagrees with scan at layer {layer} unit {unit}")
    return up, lo


# --- full analysis -------------------------------------------------------------


def analysis_inputs(net: QNetwork, data) -> np.ndarray:
    """int8 batch from a Dataset (quantized with the network input scale) or an int8 array."""
    features = getattr(data, "features", None)
    if features is not None:
        x = engine.quantize_input(net, np.asarray(features).reshape((-1,) + net.input_shape))
    else:
        x = data
    return engine.as_batch(net, x)


def _analyze_units(net, x, layer, units, bisect, verify, negative_offset, gate):
    acts = engine.trace(net, x)
    golden = engine.predict(engine.readout(net, acts[-1]))
    taps = acts[net.tap_position[layer]].reshape(len(x), -1)
    if gate:
        directions = engine.backprop_directions(net, x, acts, golden)[layer]
    pos = np.zeros((len(units), BITS), dtype=np.int64)
    neg = np.zeros((len(units), BITS), dtype=np.int64)
    skipped = 0
    for k, unit in enumerate(units):
        active = np.flatnonzero(directions[:, unit] != 0) if gate else np.arange(len(x))
        skipped += len(x) - len(active)
        if not len(active):
            continue
        up, lo = _layer_bounds(net, layer, taps[active], unit, golden[active], bisect, verify)
        up, lo = up[up != 0], lo[lo != 0]
        np.add.at(pos[k], _bit_indices(up, "positive", negative_offset) - 1, 1)
        np.add.at(neg[k], _bit_indices(lo, "negative", negative_offset) - 1, 1)
    return pos, neg, skipped


def _analyze_task(args):
    return _analyze_units(*args)


def analyze(
    net: QNetwork,
    data,
    *,
    bisect: bool = False,
    verify: bool = False,
    negative_offset: bool = True,
    gate: bool = True,
    workers: int = 1,
    units_per_task: int = 64,
) -> VulnerabilityProfile:
    """Compute counters and NVF for every Dense/Conv2D neuron over ``data``.

    ``data`` is a Dataset or an int8 batch. ``bisect`` switches the delta
    search to interval-certified bisection (identical results); ``verify``
    re-runs the scan and raises on any disagreement. ``gate=False`` disables
    the gradient gate.
    """
    x = analysis_inputs(net, data)
    if len(x) == 0:
        raise ValueError("analysis set is empty")
    tasks = []
    for layer in net.compute_layers:
        n = net.units(layer)
        for s in range(0, n, units_per_task):
            tasks.append((net, x, layer, list(range(s, min(n, s + units_per_task))), bisect, verify, negative_offset, gate))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_analyze_task, tasks))
    else:
        results = [_analyze_task(t) for t in tasks]

    counts = {layer: (np.zeros((net.units(layer), BITS), np.int64), np.zeros((net.units(layer), BITS), np.int64)) for layer in net.compute_layers}
    skipped = 0
    for task, (pos, neg, sk) in zip(tasks, results):
        layer, units = task[2], task[3]
        counts[layer][0][units] += pos
        counts[layer][1][units] += neg
        skipped += sk
    log.info("analysis: %d neurons x %d inputs, %d pairs skipped by gradient gate", net.neuron_count, len(x), skipped)
    return VulnerabilityProfile.from_counters(counts, len(x), net.digest())
