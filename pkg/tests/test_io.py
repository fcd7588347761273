"""Model, dataset, profile and plan files."""

import json
import time

import numpy as np
import pytest

import nets
from qnnharden import engine, io
from qnnharden.analysis import analyze, select_critical
from qnnharden.data import Dataset, blobs2d
from qnnharden.io import FormatError
from qnnharden.network import Dense, NeuronId, QNetwork, ReLU
from qnnharden.transform import SPLIT, TMR, ProtectionPlan, evenize, split_neurons, triplicate_neurons


def _roundtrip_bytes(net, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    io.save_model(net, a)
    io.save_model(io.load_model(a), b)
    return a.read_bytes(), b.read_bytes()


def test_model_roundtrip_is_byte_identical(tmp_path, fixture_mlp):
    a, b = _roundtrip_bytes(fixture_mlp.net, tmp_path)
    assert a == b
    back = io.load_model(tmp_path / "a.json")
    assert back.digest() == fixture_mlp.net.digest()
    assert back.input_scale == fixture_mlp.net.input_scale


def test_roundtrip_keeps_modes_readout_and_conv(tmp_path):
    rng = np.random.default_rng(0)
    conv = nets.random_conv(rng, even=True)
    pn = split_neurons(evenize(conv, [NeuronId(0, 0)]), [NeuronId(0, 0)])
    a, b = _roundtrip_bytes(pn.net, tmp_path)
    assert a == b
    assert io.load_model(tmp_path / "a.json").digest() == pn.net.digest()

    src = nets.toy_222()
    tmr = triplicate_neurons(src, [NeuronId(2, 0)])  # final layer: extends the readout
    assert tmr.net.readout is not None
    back = io.model_from_dict(json.loads(io.dumps_model(tmr.net)))
    assert np.array_equal(back.readout, tmr.net.readout)
    x = nets.TOY_222_INPUTS
    assert np.array_equal(engine.logits_batch(back, x), engine.logits_batch(src, x))


def _doc(net=None):
    return json.loads(io.dumps_model(net or nets.toy_222()))


def test_out_of_range_weight_names_its_path():
    doc = _doc()
    doc["layers"][2]["weight"] = io.encode_array(np.array([[1, 130], [0, 0]]), "dec")
    with pytest.raises(FormatError) as err:
        io.model_from_dict(doc)
    assert err.value.path == "layers[2].weight[1]"
    assert "130" in str(err.value)


def test_unknown_and_missing_fields_rejected():
    doc = _doc()
    doc["layers"][0]["colour"] = "red"
    with pytest.raises(FormatError, match=r"layers\[0\]\.colour: unknown field"):
        io.model_from_dict(doc)
    doc = _doc()
    del doc["class_count"]
    with pytest.raises(FormatError, match="class_count"):
        io.model_from_dict(doc)


def test_version_mismatch_rejected():
    doc = _doc()
    doc["version"] = 2
    with pytest.raises(FormatError, match="version"):
        io.model_from_dict(doc)
    doc = _doc()
    doc["format"] = "something-else"
    with pytest.raises(FormatError, match="format"):
        io.model_from_dict(doc)


def test_malformed_arrays_rejected():
    doc = _doc()
    doc["layers"][0]["weight"]["data"] = "hex:zz"
    with pytest.raises(FormatError, match="hex"):
        io.model_from_dict(doc)
    doc = _doc()
    doc["layers"][0]["weight"]["shape"] = [3, 2]
    with pytest.raises(FormatError, match="shape needs 6"):
        io.model_from_dict(doc)
    doc = _doc()
    doc["layers"][0]["weight"]["data"] = "oct:1"
    with pytest.raises(FormatError, match="prefix"):
        io.model_from_dict(doc)


def test_bad_json_is_a_format_error(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    with pytest.raises(FormatError):
        io.load_model(p)


@pytest.mark.parametrize("prefix", ["hex", "dec"])
def test_array_encodings(prefix):
    a = np.array([[-128, -1, 0], [1, 64, 127]], dtype=np.int8)
    enc = io.encode_array(a, prefix)
    assert enc["data"].startswith(prefix + ":")
    back = io.decode_array(enc, "int8", "w")
    assert back.dtype == np.int8 and np.array_equal(back, a)


def test_hex_is_twos_complement_big_endian():
    assert io.encode_array(np.array([-1, 1], dtype=np.int8))["data"] == "hex:ff01"
    assert io.encode_array(np.array([-2], dtype=np.int32), "hex")["data"] == "hex:fffffffe"


def test_large_mlp_loads_quickly(tmp_path):
    rng = np.random.default_rng(0)
    sizes = [784, 512, 512, 512, 512, 512, 246, 10]
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(rng.integers(-128, 128, (b, a)), rng.integers(-5000, 5000, b), 0.01, 0.05))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    net = QNetwork(tuple(layers), (784,), 1 / 127, 10)
    assert net.neuron_count * 8 == 22528
    p = tmp_path / "mlp7.json"
    io.save_model(net, p)
    t0 = time.perf_counter()
    back = io.load_model(p)
    elapsed = time.perf_counter() - t0
    print(f"2816-neuron MLP ({p.stat().st_size} bytes) loaded in {elapsed:.3f} s")
    assert elapsed < 1.0 and back.digest() == net.digest()


def test_dataset_roundtrip(tmp_path):
    ds = blobs2d("test", seed=1, n_per_class=5)
    p = tmp_path / "blobs_test.csv"
    io.save_dataset(ds, p)
    back = io.load_dataset(p)
    assert back.split == "test"
    assert np.array_equal(back.features, ds.features) and np.array_equal(back.labels, ds.labels)
    q = tmp_path / "again.csv"
    io.save_dataset(back, q)
    assert q.read_bytes() == p.read_bytes()
    assert io.load_dataset(q).split == "train"


def test_dataset_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("label,f0\n1,0.5\n2\n")
    with pytest.raises(FormatError, match=":3"):
        io.load_dataset(p)
    p.write_text("")
    with pytest.raises(FormatError):
        io.load_dataset(p)
    p.write_text("y,x\n")
    with pytest.raises(FormatError, match="header"):
        io.load_dataset(p)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), "train", 2)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]), np.array([0]))


def test_profile_roundtrip(tmp_path):
    net, x = nets.toy_2884()
    p = analyze(net, x)
    path = tmp_path / "profile.csv"
    io.save_profile(p, path)
    back = io.load_profile(path)
    assert back.same_counters(p)
    for n in p:
        assert back.nvf(n) == p.nvf(n)
    again = tmp_path / "profile2.csv"
    io.save_profile(back, again)
    assert again.read_bytes() == path.read_bytes()


def test_profile_rejects_bad_counters(tmp_path):
    net, x = nets.toy_2884()
    path = tmp_path / "profile.csv"
    io.save_profile(analyze(net, x), path)
    lines = path.read_text().splitlines()
    cells = lines[1].split(",")
    cells[3] = "999"
    path.write_text("\n".join([lines[0], ",".join(cells)] + lines[2:]) + "\n")
    with pytest.raises(FormatError, match="counter"):
        io.load_profile(path)


@pytest.mark.parametrize("mode", [SPLIT, TMR])
def test_plan_roundtrip(tmp_path, mode):
    net, x = nets.toy_2884()
    crit = select_critical(analyze(net, x), 0.1)
    pn = split_neurons(evenize(net, crit), crit) if mode == SPLIT else triplicate_neurons(net, crit)
    path = tmp_path / "plan.csv"
    io.save_plan(pn.plan, path)
    assert io.load_plan(path) == pn.plan


def test_empty_plan_needs_mode(tmp_path):
    path = tmp_path / "plan.csv"
    io.save_plan(ProtectionPlan(SPLIT, ()), path)
    with pytest.raises(FormatError, match="mode"):
        io.load_plan(path)
    assert len(io.load_plan(path, mode=TMR)) == 0


def test_digits_loader(tmp_path):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 17, (6, 64))
    labels = np.arange(6)
    path = tmp_path / "optdigits_test.csv"
    np.savetxt(path, np.column_stack([pix, labels]), fmt="%d", delimiter=",")
    ds = io.load_digits_csv(path)
    assert ds.split == "test" and ds.class_count == 10
    assert np.allclose(ds.features, pix / 16.0) and ds.labels.tolist() == labels.tolist()
    bad = tmp_path / "bad.csv"
    np.savetxt(bad, pix, fmt="%d", delimiter=",")
    with pytest.raises(FormatError, match="65"):
        io.load_digits_csv(bad)
