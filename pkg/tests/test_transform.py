"""Evenizing, splitting, triplication and the correction primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import nets
import oracles
from qnnharden import engine
from qnnharden.analysis import select_critical
from qnnharden.network import MODE_EVEN, MODE_HALF, NeuronId
from qnnharden.transform import (
    SPLIT,
    TMR,
    OddParameterError,
    ProtectionPlan,
    ReplicaGroup,
    evenize,
    lcu_correct,
    split_neurons,
    tmr_vote,
    triplicate_neurons,
)

# --- evenize -----------------------------------------------------------------------------------------


def test_evenize_rounding_rule():
    net = nets.mlp([[[4, 3, -3, -4, 1, -1]], [[1]]], [[5], [0]])
    e = evenize(net, [NeuronId(0, 0)])
    assert e.layers[0].weight.tolist() == [[4, 2, -2, -4, 0, 0]]
    assert e.layers[0].bias.tolist() == [4]
    assert e.layers[0].modes.tolist() == [MODE_EVEN]


def test_evenize_leaves_other_neurons_alone():
    net = nets.mlp([[[3, 1], [5, 7]], [[1, 1]]], [[1, 3], [1]])
    e = evenize(net, [NeuronId(0, 1)])
    assert e.layers[0].weight[0].tolist() == [3, 1] and e.layers[0].bias[0] == 1
    assert e.layers[2].weight.tolist() == [[1, 1]]


def test_evenize_fixture_accuracy_drop(fixture_mlp, fixture_profile):
    crit = select_critical(fixture_profile, 0.2)
    x = engine.quantize_input(fixture_mlp.net, fixture_mlp.test.features)
    y = fixture_mlp.test.labels
    before = np.mean(engine.forward_batch(fixture_mlp.net, x)[1] == y)
    after = np.mean(engine.forward_batch(evenize(fixture_mlp.net, crit), x)[1] == y)
    print(f"evenize at 0.2: test accuracy {before:.4f} -> {after:.4f}")
    assert before - after <= 0.01


# --- split --------------------------------------------------------------------------------------------


def test_split_worked_example():
    net = nets.mlp([[[4, -6]], [[5]]], [[2], [0]])
    pn = split_neurons(net, [NeuronId(0, 0)])
    x = np.array([3, 1], dtype=np.int8)
    assert engine.forward(net, x).logits.tolist() == [40]
    _, taps = engine.forward_with_taps(pn.net, x)
    assert taps[0].tolist() == [4, 4]
    assert pn.net.layers[0].weight.tolist() == [[2, -3], [2, -3]]
    assert pn.net.layers[2].weight.tolist() == [[5, 5]]
    assert engine.forward(pn.net, x).logits.tolist() == [40]


def test_split_empty_set_is_identity():
    net = nets.toy_222()
    pn = split_neurons(net, [])
    assert pn.net.digest() == net.digest() and len(pn.plan) == 0 and pn.added_neurons == 0


def test_split_rejects_odd_parameters():
    net = nets.mlp([[[3, 2]], [[1]]], [[0], [0]])
    with pytest.raises(OddParameterError, match="evenize"):
        split_neurons(net, [NeuronId(0, 0)])


def test_split_plan_and_size_law():
    rng = np.random.default_rng(0)
    net = nets.random_dense(rng, [4, 6, 5, 3])
    targets = [NeuronId(0, 1), NeuronId(0, 4), NeuronId(2, 0), NeuronId(4, 2)]
    src = evenize(net, targets)
    s, t = split_neurons(src, targets), triplicate_neurons(net, targets)
    assert s.net.neuron_count == net.neuron_count + 4
    assert t.net.neuron_count == net.neuron_count + 8
    assert [g.original for g in s.plan.groups] == targets
    for g in s.plan.groups:
        assert g.replicas[0] == g.original and len(g.replicas) == 2
        assert s.net.layers[g.original.layer].modes[g.replicas[1].unit] == MODE_HALF
    assert s.plan.mode == SPLIT and t.plan.mode == TMR
    assert s.source_ref == src.digest()


def test_plan_validation():
    with pytest.raises(ValueError):
        ProtectionPlan(SPLIT, (ReplicaGroup(NeuronId(0, 0), (NeuronId(0, 0), NeuronId(0, 1), NeuronId(0, 2))),))
    with pytest.raises(ValueError):
        ProtectionPlan(SPLIT, (ReplicaGroup(NeuronId(0, 0), (NeuronId(0, 0), NeuronId(0, 2))),
                               ReplicaGroup(NeuronId(0, 1), (NeuronId(0, 1), NeuronId(0, 2)))))
    with pytest.raises(ValueError):
        ReplicaGroup(NeuronId(0, 0), (NeuronId(0, 0), NeuronId(2, 1)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_split_exactness_property(seed):
    rng = np.random.default_rng(seed)
    if seed % 4 == 0:
        net = nets.random_conv(rng, even=True)
    else:
        depth = int(rng.integers(2, 5))
        sizes = [int(rng.integers(2, 6))] + [int(rng.integers(2, 9)) for _ in range(depth - 1)] + [3]
        net = nets.random_dense(rng, sizes, even=True)
    neurons = list(net.neurons())
    targets = [neurons[i] for i in sorted(rng.choice(len(neurons), int(rng.integers(1, len(neurons) + 1)), replace=False))]
    src = evenize(net, targets)
    pn = split_neurons(src, targets)
    x = nets.random_inputs(rng, net, 20)
    assert np.array_equal(engine.logits_batch(src, x), engine.logits_batch(pn.net, x))


def test_split_range_law():
    rng = np.random.default_rng(8)
    for _ in range(20):
        net = nets.random_dense(rng, [4, 8, 6, 3])
        targets = [n for n in net.neurons() if n.layer < 4]
        pn = split_neurons(evenize(net, targets), targets)
        acts = engine.trace(pn.net, nets.random_inputs(rng, net, 30))
        for g in pn.plan.groups:
            vals = acts[pn.net.tap_position[g.original.layer]][:, [r.unit for r in g.replicas]]
            assert vals.min() >= 0 and vals.max() <= 63


def test_split_fixture_logits_identical(fixture_mlp, fixture_profile):
    crit = select_critical(fixture_profile, 0.2)
    src = evenize(fixture_mlp.net, crit)
    x = engine.quantize_input(src, fixture_mlp.test.features)
    assert np.array_equal(engine.logits_batch(src, x), engine.logits_batch(split_neurons(src, crit).net, x))


def test_conv_protection_is_per_channel():
    rng = np.random.default_rng(3)
    net = nets.random_conv(rng, even=True)
    pn = split_neurons(evenize(net, [NeuronId(0, 5)]), [NeuronId(0, 5)])
    spatial = net.spatial(0)
    assert pn.net.layers[0].channels == net.layers[0].channels + 1
    assert len(pn.plan) == spatial
    assert pn.net.neuron_count == net.neuron_count + spatial


# --- TMR --------------------------------------------------------------------------------------------


def test_triplicate_empty_set():
    net = nets.toy_222()
    assert triplicate_neurons(net, []).net.digest() == net.digest()


def test_triplicate_is_fault_free_identical():
    rng = np.random.default_rng(9)
    for _ in range(10):
        net = nets.random_conv(rng) if rng.random() < 0.3 else nets.random_dense(rng, [4, 6, 5, 3])
        targets = [n for n in net.neurons() if rng.random() < 0.4]
        pn = triplicate_neurons(net, targets)
        x = nets.random_inputs(rng, net, 10)
        assert np.array_equal(engine.logits_batch(net, x), engine.logits_batch(pn.net, x))
        assert pn.added_neurons == pn.net.neuron_count - net.neuron_count


# --- correction primitives -------------------------------------------------------------------------


def test_lcu_examples():
    assert lcu_correct(20, 20) == 20
    assert lcu_correct(52, 20) == 20
    assert lcu_correct(84, 84) == 20


def test_vote_examples():
    assert tmr_vote(20, 20, 52) == 20
    assert tmr_vote(7, 7, 7) == 7
    assert tmr_vote(1, 2, 3) == 3


def test_lcu_single_fault_correction_exhaustive():
    for y in range(64):
        for bit in range(8):
            bad = oracles.flip(y, bit)
            for a, b in ((bad, y), (y, bad)):
                out = lcu_correct(a, b)
                if bit == 6 or not (y >> bit) & 1:  # 0->1 flip, or the reset bit
                    assert out == y
                else:  # 1->0 flip: that bit may be lost, nothing else changes
                    assert out in (y, y & ~(1 << bit)) and out <= y


def test_tmr_single_fault_correction_exhaustive():
    for y in range(-128, 128):
        for bit in range(8):
            bad = oracles.flip(y, bit)
            assert tmr_vote(bad, y, y) == tmr_vote(y, bad, y) == tmr_vote(y, y, bad) == y


@settings(max_examples=300)
@given(st.integers(-128, 127), st.integers(-128, 127), st.integers(-128, 127))
def test_vote_matches_reference_and_random_corruption(a, b, c):
    assert tmr_vote(a, b, c) == oracles.vote(a, b, c)
    assert tmr_vote(a, a, c) == a


@settings(max_examples=300)
@given(st.integers(-128, 127), st.integers(-128, 127))
def test_lcu_matches_reference(a, b):
    assert lcu_correct(a, b) == oracles.lcu(a, b)


def test_primitives_work_on_arrays():
    a = np.array([20, 52, 84], dtype=np.int8)
    b = np.array([20, 20, 84], dtype=np.int8)
    assert lcu_correct(a, b).tolist() == [20, 20, 20]
    assert tmr_vote(a, b, b).tolist() == [20, 20, 84]
