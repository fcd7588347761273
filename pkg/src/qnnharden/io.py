"""File formats: model JSON container, dataset CSV, profile CSV and plan CSV.

Model files are JSON with a ``format``/``version`` header. Integer arrays
are objects ``{"shape": [...], "data": "<prefix>:<payload>"}`` where the
prefix is ``dec`` (comma-separated decimal) or ``hex`` (big-endian two's
complement, two hex digits per byte of the element type). Scales are stored
as ``float.hex`` strings so they round-trip bit-exactly. Unknown keys are
rejected, and every error names the offending field path.
"""

from __future__ import annotations

import csv
import json
import os
from typing import Optional

import numpy as np

from .analysis import BITS, VulnerabilityProfile
from .data import Dataset
from .network import ACC_LIMIT, Conv2D, Dense, Flatten, MaxPool2D, NeuronId, QNetwork, ReLU
from .transform import SPLIT, TMR, ProtectionPlan, ReplicaGroup

MODEL_FORMAT = "qnnharden-model"
MODEL_VERSION = 1


class FormatError(ValueError):
    """A file could not be parsed; the message starts with the field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# --- arrays and scalars -------------------------------------------------------

_RANGES = {
    "int8": (-128, 127),
    "uint8": (0, 2),  # output modes
    "int32": (-ACC_LIMIT - 1, ACC_LIMIT),
    "readout": (0, ACC_LIMIT),
}
_DTYPES = {"int8": np.int8, "uint8": np.uint8, "int32": np.int32, "readout": np.int32}


def encode_array(a: np.ndarray, prefix: Optional[str] = None) -> dict:
    a = np.asarray(a)
    if prefix is None:
        prefix = "hex" if a.dtype == np.int8 else "dec"
    flat = a.ravel()
    if prefix == "hex":
        payload = flat.astype(a.dtype.newbyteorder(">")).tobytes().hex()
    elif prefix == "dec":
        payload = ",".join(map(str, flat.tolist()))
    else:
        raise ValueError(f"unknown array prefix {prefix!r}")
    return {"shape": list(a.shape), "data": f"{prefix}:{payload}"}


def decode_array(obj, kind: str, path: str) -> np.ndarray:
    if not isinstance(obj, dict):
        raise FormatError(path, "expected an array object")
    _check_keys(obj, {"shape", "data"}, path, required={"shape", "data"})
    shape = obj["shape"]
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise FormatError(f"{path}.shape", "must be a list of nonnegative integers")
    data = obj["data"]
    if not isinstance(data, str) or ":" not in data:
        raise FormatError(f"{path}.data", "expected '<prefix>:<payload>'")
    prefix, payload = data.split(":", 1)
    dtype = np.dtype(_DTYPES[kind])
    lo, hi = _RANGES[kind]
    size = int(np.prod(shape)) if shape else 1
    if prefix == "hex":
        try:
            raw = bytes.fromhex(payload)
        except ValueError:
            raise FormatError(f"{path}.data", "malformed hex payload") from None
        if len(raw) != size * dtype.itemsize:
            raise FormatError(f"{path}.data", f"holds {len(raw) // dtype.itemsize} values, shape needs {size}")
        values = np.frombuffer(raw, dtype=dtype.newbyteorder(">")).astype(np.int64)
    elif prefix == "dec":
        try:
            values = np.array(payload.split(",") if payload else [], dtype=np.int64)
        except (ValueError, OverflowError):
            raise FormatError(f"{path}.data", "malformed decimal payload") from None
        if len(values) != size:
            raise FormatError(f"{path}.data", f"holds {len(values)} values, shape needs {size}")
    else:
        raise FormatError(f"{path}.data", f"unknown array prefix {prefix!r}")
    bad = np.flatnonzero((values < lo) | (values > hi))
    if len(bad):
        i = int(bad[0])
        raise FormatError(f"{path}[{i}]", f"value {int(values[i])} outside [{lo}, {hi}]")
    return values.astype(dtype).reshape(shape)


def _enc_float(x: float) -> str:
    return float(x).hex()


def _dec_float(s, path: str) -> float:
    if not isinstance(s, str):
        raise FormatError(path, "expected a hex float string")
    try:
        v = float.fromhex(s)
    except ValueError:
        raise FormatError(path, f"malformed hex float {s!r}") from None
    if not v > 0 or not np.isfinite(v):
        raise FormatError(path, f"scale must be positive and finite, got {v}")
    return v


def _int(obj, key, path, lo=None):
    v = obj[key]
    if not isinstance(v, int) or isinstance(v, bool) or (lo is not None and v < lo):
        raise FormatError(f"{path}.{key}", f"expected an integer >= {lo}")
    return v


def _check_keys(obj: dict, allowed: set, path: str, required: Optional[set] = None):
    extra = sorted(set(obj) - allowed)
    if extra:
        raise FormatError(f"{path}.{extra[0]}" if path else extra[0], "unknown field")
    missing = sorted((required if required is not None else allowed) - set(obj))
    if missing:
        raise FormatError(f"{path}.{missing[0]}" if path else missing[0], "missing field")


# --- model container ---------------------------------------------------------------


def model_to_dict(net: QNetwork) -> dict:
    layers = []
    for layer in net.layers:
        d = {"kind": layer.kind}
        if isinstance(layer, (Dense, Conv2D)):
            d["weight"] = encode_array(layer.weight)
            d["bias"] = encode_array(layer.bias)
            d["weight_scale"] = _enc_float(layer.weight_scale)
            d["output_scale"] = _enc_float(layer.output_scale)
            d["modes"] = encode_array(layer.modes, "dec")
            if isinstance(layer, Conv2D):
                d["stride"] = layer.stride
                d["padding"] = layer.padding
        elif isinstance(layer, MaxPool2D):
            d["window"] = layer.window
            d["stride"] = layer.stride
        layers.append(d)
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "name": net.name,
        "class_count": net.class_count,
        "input_shape": list(net.input_shape),
        "input_scale": _enc_float(net.input_scale),
        "readout": None if net.readout is None else encode_array(net.readout, "dec"),
        "metadata": net.metadata,
        "layers": layers,
    }


_LAYER_KEYS = {
    "dense": {"kind", "weight", "bias", "weight_scale", "output_scale", "modes"},
    "conv2d": {"kind", "weight", "bias", "weight_scale", "output_scale", "modes", "stride", "padding"},
    "relu": {"kind"},
    "flatten": {"kind"},
    "maxpool2d": {"kind", "window", "stride"},
}


def _layer_from_dict(d, path: str):
    if not isinstance(d, dict) or "kind" not in d:
        raise FormatError(path, "expected a layer object with a 'kind'")
    kind = d["kind"]
    if kind not in _LAYER_KEYS:
        raise FormatError(f"{path}.kind", f"unknown layer kind {kind!r}")
    keys = _LAYER_KEYS[kind]
    _check_keys(d, keys, path, required=keys - {"modes"})
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    if kind == "maxpool2d":
        return MaxPool2D(_int(d, "window", path, 1), _int(d, "stride", path, 1))
    w = decode_array(d["weight"], "int8", f"{path}.weight")
    b = decode_array(d["bias"], "int32", f"{path}.bias")
    modes = decode_array(d["modes"], "uint8", f"{path}.modes") if "modes" in d else None
    ws = _dec_float(d["weight_scale"], f"{path}.weight_scale")
    os_ = _dec_float(d["output_scale"], f"{path}.output_scale")
    try:
        if kind == "dense":
            return Dense(w, b, ws, os_, modes)
        return Conv2D(w, b, ws, os_, _int(d, "stride", path, 1), _int(d, "padding", path, 0), modes)
    except ValueError as exc:
        raise FormatError(path, str(exc)) from None


def model_from_dict(doc) -> QNetwork:
    if not isinstance(doc, dict):
        raise FormatError("$", "expected a JSON object")
    if doc.get("format") != MODEL_FORMAT:
        raise FormatError("format", f"expected {MODEL_FORMAT!r}, got {doc.get('format')!r}")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError("version", f"unsupported version {doc.get('version')!r} (expected {MODEL_VERSION})")
    keys = {"format", "version", "name", "class_count", "input_shape", "input_scale", "readout", "metadata", "layers"}
    _check_keys(doc, keys, "")
    if not isinstance(doc["layers"], list):
        raise FormatError("layers", "expected a list")
    layers = [_layer_from_dict(d, f"layers[{i}]") for i, d in enumerate(doc["layers"])]
    shape = doc["input_shape"]
    if not isinstance(shape, list) or not all(isinstance(s, int) and s > 0 for s in shape):
        raise FormatError("input_shape", "must be a list of positive integers")
    if not isinstance(doc["metadata"], dict):
        raise FormatError("metadata", "expected an object")
    if not isinstance(doc["name"], str):
        raise FormatError("name", "expected a string")
    readout = None if doc["readout"] is None else decode_array(doc["readout"], "readout", "readout")
    try:
        return QNetwork(
            tuple(layers),
            tuple(shape),
            _dec_float(doc["input_scale"], "input_scale"),
            _int(doc, "class_count", "", 1),
            readout=readout,
            name=doc["name"],
            metadata=doc["metadata"],
        )
    except ValueError as exc:
        raise FormatError("layers", str(exc)) from None


def dumps_model(net: QNetwork) -> str:
    return json.dumps(model_to_dict(net), sort_keys=True, indent=1) + "\n"


def save_model(net: QNetwork, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_model(net))


def load_model(path) -> QNetwork:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError("$", f"invalid JSON: {exc}") from None
    return model_from_dict(doc)


# --- datasets --------------------------------------------------------------------


def _split_from_name(path) -> str:
    base = os.path.basename(str(path)).lower()
    return "test" if "test" in base else "train"


def save_dataset(ds: Dataset, path) -> None:
    feats = ds.features.reshape(len(ds), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(feats.shape[1])])
        for y, row in zip(ds.labels.tolist(), feats.tolist()):
            w.writerow([y] + [repr(v) for v in row])


def load_dataset(path, split: Optional[str] = None, class_count: Optional[int] = None) -> Dataset:
    """Read ``label,f0,f1,...``; the split defaults to 'test' if the file name says so."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(str(path), "empty file (no header)")
    header = rows[0]
    if not header or header[0] != "label" or header[1:] != [f"f{i}" for i in range(len(header) - 1)]:
        raise FormatError(f"{path}:1", "header must be label,f0,f1,...")
    labels, feats = [], []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{n}", f"expected {len(header)} columns, got {len(row)}")
        try:
            labels.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{n}", str(exc)) from None
    features = np.array(feats, dtype=np.float64).reshape(len(labels), len(header) - 1)
    return Dataset(features, np.array(labels, dtype=np.int64), split or _split_from_name(path), class_count)


def load_digits_csv(path, split: Optional[str] = None) -> Dataset:
    """Load an 8x8 digits CSV: 64 pixel columns (0..16) followed by the label,
    without a header. Pixels are scaled to [0, 1]."""
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    if raw.shape[1] != 65:
        raise FormatError(str(path), f"expected 65 columns, got {raw.shape[1]}")
    return Dataset(raw[:, :64] / 16.0, raw[:, 64].astype(np.int64), split or _split_from_name(path), 10)


# --- profile CSV ------------------------------------------------------------------

PROFILE_HEADER = ["layer", "unit", "nvf"] + [f"pos{j}" for j in range(1, 9)] + [f"neg{j}" for j in range(1, 9)] + ["inputs"]


def save_profile(profile: VulnerabilityProfile, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for layer, lv in profile.layers.items():
            for u in range(len(lv.nvf)):
                w.writerow([layer, u, repr(float(lv.nvf[u]))] + lv.pos[u].tolist() + lv.neg[u].tolist() + [profile.inputs_seen])


def load_profile(path) -> VulnerabilityProfile:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != PROFILE_HEADER:
        raise FormatError(f"{path}:1", "unexpected profile header")
    per_layer: dict = {}
    inputs = None
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(PROFILE_HEADER):
            raise FormatError(f"{path}:{n}", "wrong column count")
        try:
            vals = [int(v) for v in row[:2] + row[3:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{n}", str(exc)) from None
        layer, unit, counters, seen = vals[0], vals[1], vals[2:-1], vals[-1]
        if inputs is None:
            inputs = seen
        elif seen != inputs:
            raise FormatError(f"{path}:{n}", "inconsistent inputs column")
        per_layer.setdefault(layer, []).append((unit, counters))
    if inputs is None or inputs < 1:
        raise FormatError(str(path), "profile has no rows")
    counts = {}
    for layer, entries in per_layer.items():
        entries.sort()
        if [u for u, _ in entries] != list(range(len(entries))):
            raise FormatError(str(path), f"layer {layer} units are not 0..{len(entries) - 1}")
        arr = np.array([c for _, c in entries], dtype=np.int64)
        if arr.min() < 0 or arr.max() > inputs:
            raise FormatError(str(path), f"layer {layer} counter outside [0, inputs]")
        counts[layer] = (arr[:, :BITS], arr[:, BITS:])
    return VulnerabilityProfile.from_counters(counts, inputs)


# --- protection plan CSV --------------------------------------------------------------

PLAN_HEADER = ["mode", "layer", "orig_unit", "replica_0", "replica_1", "replica_2"]


def save_plan(plan: ProtectionPlan, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAN_HEADER)
        for g in plan.groups:
            reps = [r.unit for r in g.replicas] + [""] * (3 - len(g.replicas))
            w.writerow([plan.mode, g.original.layer, g.original.unit] + reps)


def load_plan(path, mode: Optional[str] = None) -> ProtectionPlan:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != PLAN_HEADER:
        raise FormatError(f"{path}:1", "unexpected plan header")
    groups, modes = [], set()
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(PLAN_HEADER) or row[0] not in (SPLIT, TMR):
            raise FormatError(f"{path}:{n}", "malformed plan row")
        modes.add(row[0])
        try:
            layer, orig = int(row[1]), int(row[2])
            reps = [int(v) for v in row[3:] if v != ""]
        except ValueError as exc:
            raise FormatError(f"{path}:{n}", str(exc)) from None
        groups.append(ReplicaGroup(NeuronId(layer, orig), tuple(NeuronId(layer, r) for r in reps)))
    if len(modes) > 1:
        raise FormatError(str(path), "plan mixes split and tmr rows")
    plan_mode = modes.pop() if modes else mode
    if plan_mode is None:
        raise FormatError(str(path), "empty plan; pass the mode explicitly")
    try:
        return ProtectionPlan(plan_mode, tuple(groups))
    except ValueError as exc:
        raise FormatError(str(path), str(exc)) from None
