import numpy as np
import pytest

from ibrasnn import energy as E
from ibrasnn.energy import EnergyModel, OpLedger, compare_modes, count_ops, efficiency_ratio, fanout_map, price
from ibrasnn.lowering import lower_graph
from ibrasnn.network import Conv, Flatten, Head, LayerGraph, Neuron, cnn
from ibrasnn.neuron import NeuronConfig

from conftest import random_graph, random_inputs
from oracles import _conv_synapses, enumerate_events


def one_by_one(cfg, out=4):
    conv = Conv(1, out, 1, 1, 0)
    return LayerGraph([Neuron(cfg), conv, Flatten(), Head(out, 2)], (1, 1, 1))


def conv_acs(graph, value, scheme=None):
    led = count_ops(lower_graph(graph), np.full((1, 1, 1, 1), value, dtype=np.float32), scheme=scheme)
    return led.layer_totals()[1]


def test_popcount_rule():
    assert conv_acs(one_by_one(NeuronConfig.ibra(D=7, N=1)), 5.0) == (0, 2 * 4)


def test_unary_rule():
    assert conv_acs(one_by_one(NeuronConfig.ilif(D=7)), 5.0) == (0, 5 * 4)
    assert conv_acs(one_by_one(NeuronConfig.ibra(D=7, N=1)), 5.0, scheme="unary") == (0, 5 * 4)


def test_scaled_value_popcount():
    # 0.07 with N=100 is code 7 = three set bits
    assert conv_acs(one_by_one(NeuronConfig.ibra(D=1.27, N=100)), 0.07) == (0, 3 * 4)


@pytest.mark.parametrize("scheme", ["bitplane", "unary"])
def test_ledger_matches_event_enumeration(rng, scheme):
    g = cnn(channels=(4, 6), seed=3)
    for l in g.layers:
        if isinstance(l, Conv):
            l.weight.assign(l.weight.data * 4)
    low = lower_graph(g)
    x = rng.standard_normal((10, 1, 8, 8)).astype(np.float32)
    assert count_ops(low, x, scheme=scheme).as_dict() == enumerate_events(low, x, scheme)


def test_training_and_lowered_counts_agree(rng):
    for _ in range(5):
        g = random_graph(rng, kinds=("ibra", "ilif"))
        x = random_inputs(g, 6, rng)
        assert count_ops(g, x).as_dict() == count_ops(lower_graph(g), x).as_dict()


def test_spike_encoding_counts_first_layer_once(rng):
    g = random_graph(np.random.default_rng(2), timesteps=3)
    gs = LayerGraph(g.layers, g.input_shape, encoding="spike")
    x = random_inputs(g, 3, rng)
    direct, spike = count_ops(lower_graph(g), x), count_ops(lower_graph(gs), x)
    assert direct.macs == 3 * spike.macs
    assert direct.acs == spike.acs


def test_counting_does_not_perturb(rng):
    g = random_graph(rng)
    low = lower_graph(g)
    x = random_inputs(g, 5, rng)
    before = low.forward(x).logits.copy()
    count_ops(low, x)
    np.testing.assert_array_equal(low.forward(x).logits, before)


def test_lowered_activation_paths_have_no_macs(rng):
    g = random_graph(rng)
    low = lower_graph(g)
    led = count_ops(low, random_inputs(g, 4, rng))
    ac_layers = {n.origin[0] for n in low.nodes if n.kind.startswith("ac_")}
    assert all(led.layer_totals()[l][0] == 0 for l in ac_layers if l in led.layer_totals())


def test_zeroing_an_activation_never_increases_counts(rng):
    codes = rng.integers(0, 16, (3, 2, 4, 4))
    fo = fanout_map("conv", (2, 4, 4), out_channels=3, kernel_size=3, padding=1)
    for sched, planes in (("bitplane", 4), ("unary", 15)):
        a, b = OpLedger(), OpLedger()
        E._count_spiking(a, 0, 0, codes, fo, sched, planes)
        z = codes.copy()
        z[1, 0, 2, 2] = 0
        E._count_spiking(b, 0, 0, z, fo, sched, planes)
        for k, (m, c) in b.as_dict().items():
            assert c <= a.as_dict()[k][1]


def test_fanout_map_matches_enumeration():
    class Node:
        weight = np.zeros((5, 2, 3, 3))
        stride, padding = 2, 1
    fo = fanout_map("conv", (2, 7, 6), out_channels=5, kernel_size=3, stride=2, padding=1)
    reach = _conv_synapses(Node, (2, 7, 6))
    for (iy, ix), n in reach.items():
        assert fo[0, iy, ix] == fo[1, iy, ix] == n


# pricing ---------------------------------------------------------------------------

def test_empty_ledger_costs_nothing():
    r = price(OpLedger())
    assert r.total_mj == 0 and r.rows == []


def test_billion_macs():
    led = OpLedger()
    led.add(0, 0, -1, macs=10 ** 9)
    assert price(led, EnergyModel(e_mac=4.6)).total_mj == pytest.approx(4.6)


def test_price_is_linear(rng):
    a, b = OpLedger(), OpLedger()
    for led in (a, b):
        for _ in range(20):
            led.add(int(rng.integers(3)), int(rng.integers(2)), int(rng.integers(-1, 4)),
                    int(rng.integers(100)), int(rng.integers(100)))
    assert price(a + b).total_mj == pytest.approx(price(a).total_mj + price(b).total_mj, rel=1e-12)


def test_reference_energy_ratio():
    assert round(efficiency_ratio(2.79, 0.44), 2) == 6.34


def test_model_validation():
    with pytest.raises(ValueError):
        EnergyModel(e_mac=0)
    with pytest.raises(ValueError):
        OpLedger().add(0, 0, 0, acs=-1)


def test_csv_columns(rng):
    g = random_graph(rng)
    csv = price(count_ops(lower_graph(g), random_inputs(g, 2, rng))).to_csv()
    assert csv.splitlines()[0] == "layer,timestep,planes,macs,acs,energy_pj"


# mode comparison -----------------------------------------------------------------------

def test_zero_activations_cost_only_first_layer(rng):
    g = cnn(seed=0)
    x = np.zeros((3, 1, 8, 8), dtype=np.float32)
    for layer in g.layers:
        if hasattr(layer, "bias") and layer.bias is not None:
            layer.bias.assign(np.zeros_like(layer.bias.data))
        if hasattr(layer, "beta"):
            layer.beta.assign(np.zeros_like(layer.beta.data))
    rows = {r["mode"]: r for r in compare_modes(g, lower_graph(g), x)}
    first = count_ops(g, x).layer_totals()[0][0]
    for mode in ("LIF", "I-LIF-unary", "IBRA-bitplane"):
        assert rows[mode]["acs"] == 0
    assert rows["IBRA-bitplane"]["macs"] == first


def test_bitplanes_cheaper_when_values_exceed_popcount(rng):
    g = cnn(channels=(4, 6), seed=1)
    low = lower_graph(g)
    x = rng.standard_normal((8, 1, 8, 8)).astype(np.float32) * 2
    rows = {r["mode"]: r for r in compare_modes(g, low, x)}
    res = low.forward(x, trains=True)
    codes = np.concatenate([t.reconstruct().reshape(-1) for t in res.trains.values()])
    pop = np.array([bin(int(c)).count("1") for c in codes])
    assert codes.mean() >= pop.mean()
    assert rows["IBRA-bitplane"]["acs"] <= rows["I-LIF-unary"]["acs"]
    assert rows["ANN"]["ratio_vs_ann"] == 1.0


@pytest.mark.parametrize("d_n", [15, 127, 511, 4095])
def test_doubling_ceiling_adds_one_plane(rng, d_n):
    codes = rng.integers(0, d_n + 1, (4, 3, 5, 5))
    small = NeuronConfig.ibra(D=d_n, N=1)
    big = NeuronConfig.ibra(D=2 * d_n + 1, N=1)
    assert big.nbits - small.nbits == 1
    fo = fanout_map("linear", (3, 5, 5), out_features=7)
    a, b = OpLedger(), OpLedger()
    E._count_spiking(a, 0, 0, codes, fo, "bitplane", small.nbits)
    E._count_spiking(b, 0, 0, codes, fo, "bitplane", big.nbits)
    assert a.acs == b.acs


def test_mode_table_has_exclusions_header(rng):
    g = cnn(seed=0)
    table = E.format_table(compare_modes(g, lower_graph(g), rng.standard_normal((2, 1, 8, 8))))
    assert table.splitlines()[0] == E.EXCLUSIONS
