import numpy as np
import pytest

from ibrasnn import data
from ibrasnn import tensor as T
from ibrasnn.errors import LoweringError, VerificationError
from ibrasnn.lowering import (BitPlaneTrain, audit_accumulate_only, calibrate_ceiling, convert_ann, lower_graph,
                              reconstruct, to_bitplanes, to_unary, verify_equivalence)
from ibrasnn.network import (Activation, BatchNorm, Conv, Flatten, Head, LayerGraph, Linear, Neuron, Pool, cnn,
                             make_activation, mlp)
from ibrasnn.neuron import NeuronConfig

from conftest import DN_PAIRS, random_graph, random_inputs


# bit-planes -----------------------------------------------------------------------

def test_four_is_one_spike():
    planes = to_bitplanes(np.array([4]), 1, 7)
    assert planes[:, 0].tolist() == [0, 0, 1]
    assert to_unary(np.array([4]), 4).sum() == 4 and planes.sum() == 1


def test_zero_is_all_zero_planes():
    assert not to_bitplanes(np.zeros((2, 3)), 100, 511).any()


def test_exhaustive_round_trip_511():
    v = np.arange(512)
    planes = to_bitplanes(v, 1, 511)
    assert planes.shape == (9, 512)
    np.testing.assert_array_equal(reconstruct(planes), v)


@pytest.mark.parametrize("D,N", DN_PAIRS)
def test_round_trip_from_scaled_values(D, N):
    cfg = NeuronConfig.ibra(D=D, N=N)
    codes = np.arange(cfg.d_n + 1)
    values = codes / N
    np.testing.assert_array_equal(reconstruct(to_bitplanes(values, N, cfg.d_n)), codes)


def test_non_integral_rejected():
    with pytest.raises(LoweringError, match="integral"):
        to_bitplanes(np.array([0.015]), 100, 511)


def test_out_of_range_rejected():
    with pytest.raises(LoweringError, match="outside"):
        to_bitplanes(np.array([5.12]), 100, 511)
    with pytest.raises(LoweringError):
        to_bitplanes(np.array([-1]), 1, 7)


def test_unary_examples(rng):
    assert to_unary(np.array([3]), 4)[:, 0].tolist() == [1, 1, 1, 0]
    assert not to_unary(np.array([0]), 4).any()
    v = rng.integers(0, 9, (5, 6))
    np.testing.assert_array_equal(to_unary(v, 8).sum(axis=0), v)


def test_unary_and_binary_agree(rng):
    v = rng.integers(0, 16, 200)
    np.testing.assert_array_equal(to_unary(v, 15).sum(axis=0), reconstruct(to_bitplanes(v, 1, 15)))


@pytest.mark.parametrize("D,N", DN_PAIRS)
def test_plane_cost_is_logarithmic(D, N):
    cfg = NeuronConfig.ibra(D=D, N=N)
    g = LayerGraph([Neuron(cfg), Head(2, 2)], (2,))
    node = lower_graph(g).nodes[1]
    assert node.planes == cfg.nbits == int(np.ceil(np.log2(cfg.d_n + 1)))
    unary = lower_graph(LayerGraph([Neuron(NeuronConfig.ilif(D=cfg.d_n)), Head(2, 2)], (2,))).nodes[1]
    assert unary.planes == cfg.d_n


def test_bitplane_train_values():
    bits = to_bitplanes(np.array([[0.03, 0.05]]), 100, 7)[None]  # [T, B, 1, 2]
    train = BitPlaneTrain(bits, 100, 3)
    np.testing.assert_allclose(train.values(), [[[0.03, 0.05]]])


# lowering --------------------------------------------------------------------------------

def test_weight_divided_by_scale():
    g = LayerGraph([Neuron(NeuronConfig.ibra(D=1.5, N=10)), Head(1, 1)], (1,))
    g.layers[1].weight.assign([[0.5]])
    low = lower_graph(g)
    assert low.nodes[1].weight[0, 0] == pytest.approx(0.05, abs=1e-17)
    assert low.nodes[1].weight[0, 0] * 10 == pytest.approx(0.5, rel=1e-15)


def test_worked_example_three_hundredths():
    g = LayerGraph([Neuron(NeuronConfig.ibra(D=5.11, N=100)), Head(1, 1)], (1,))
    g.layers[1].weight.assign([[1.0]])
    low = lower_graph(g)
    res = low.forward(np.array([[0.03]]), trains=True)
    assert res.trains[0].bits[0, :, 0, 0].tolist() == [1, 1, 0, 0, 0, 0, 0, 0, 0]
    assert res.logits[0, 0] == pytest.approx(0.03, abs=1e-15)
    assert g.astype("real64").run(np.array([[0.03]])).logits.data[0, 0] == pytest.approx(0.03, abs=1e-15)


def test_batchnorm_is_folded(rng):
    g = cnn(seed=1)
    low = lower_graph(g)
    assert all(n.kind != "batchnorm" for n in low.nodes)
    assert [n.origin for n in low.nodes if n.kind == "mac_conv"] == [(0, 1)]


def test_random_cnn_equivalence(rng):
    g = cnn(channels=(6, 8), seed=2)
    for layer in g.layers:
        if isinstance(layer, Conv):
            layer.weight.assign(layer.weight.data * 3)
    x = rng.standard_normal((16, 1, 8, 8)).astype(np.float32)
    rep = verify_equivalence(g, lower_graph(g), x, tol=1e-5)
    assert rep.passed, rep.summary()


def test_trivial_lowering_is_exact(rng):
    lin, head = Linear(6, 5, rng=rng), Head(5, 3, rng=rng)
    lin.weight.assign(rng.integers(-2, 3, (5, 6)).astype(float))
    lin.bias.assign(np.zeros(5))
    head.weight.assign(rng.integers(-2, 3, (3, 5)).astype(float))
    g = LayerGraph([lin, Neuron(NeuronConfig.ilif(D=4)), head], (6,))
    x = rng.integers(-3, 4, (20, 6)).astype(np.float32)
    rep = verify_equivalence(g, lower_graph(g), x)
    assert rep.max_abs_diff == 0.0 and rep.passed


def test_fault_injection_locates_layer(rng):
    g = random_graph(np.random.default_rng(5), max_synaptic=4)
    low = lower_graph(g)
    ac = [n for n in low.nodes if n.kind.startswith("ac_")]
    target = ac[0]
    target.weight = target.weight * 1.01
    rep = verify_equivalence(g, low, random_inputs(g, 10, rng))
    assert not rep.passed
    assert rep.failing_layer == target.origin[0]
    assert f"layer {target.origin[0]}" in rep.summary()


def test_architecture_mismatch(rng):
    with pytest.raises(VerificationError):
        verify_equivalence(mlp(2, 2), lower_graph(cnn()), np.zeros((1, 2)))


def test_spike_encoding_matches_direct(rng):
    g = random_graph(np.random.default_rng(9), timesteps=3)
    gs = LayerGraph(g.layers, g.input_shape, encoding="spike")
    x = random_inputs(g, 4, rng)
    np.testing.assert_array_equal(lower_graph(g).forward(x).logits, lower_graph(gs).forward(x).logits)


@pytest.mark.parametrize("kinds", [("ilif",), ("ibra", "ilif")])
def test_mixed_neuron_equivalence(rng, kinds):
    for _ in range(5):
        g = random_graph(rng, kinds=kinds)
        rep = verify_equivalence(g, lower_graph(g), random_inputs(g, 8, rng))
        assert rep.passed, rep.summary()


def test_lowering_rejects_unfoldable_graphs():
    with pytest.raises(LoweringError, match="BatchNorm"):
        lower_graph(LayerGraph([BatchNorm(2), Head(2, 2)], (2,)))
    with pytest.raises(LoweringError, match="convert_ann"):
        lower_graph(LayerGraph([Linear(2, 2), Activation("relu"), Head(2, 2)], (2,)))
    with pytest.raises(LoweringError, match="Pool"):
        lower_graph(LayerGraph([Conv(1, 2), Neuron(NeuronConfig.ibra()), Pool(2), Flatten(), Head(8, 2)],
                               (1, 4, 4)))
    with pytest.raises(LoweringError):
        lower_graph(lower_graph(mlp(2, 2)))


# audit -----------------------------------------------------------------------------------

def test_audit_passes_lowered_graphs(rng):
    for _ in range(10):
        assert audit_accumulate_only(lower_graph(random_graph(rng, kinds=("ibra", "ilif")))) == []


def test_audit_flags_multiplication_on_spikes(rng):
    low = lower_graph(random_graph(np.random.default_rng(3)))
    node = next(n for n in low.nodes if n.kind.startswith("ac_"))
    node.ops = ("multiply", "accumulate")
    assert any("multiplies spike inputs" in p for p in audit_accumulate_only(low))
    node.kind = "mac_linear"
    assert audit_accumulate_only(low)


# A2S conversion ------------------------------------------------------------------------------

def _ann(rng, act):
    lin, head = Linear(4, 16, rng=rng), Head(16, 3, rng=rng)
    lin.bias.assign(rng.uniform(0, 1, 16))
    return LayerGraph([lin, act, head], (4,))


def test_conversion_error_within_quantization_bound(rng):
    ann = _ann(rng, Activation("clip", ceiling=5.11))
    snn = convert_ann(ann, N=100)
    x = (rng.standard_normal((50, 4)) * 3).astype(np.float32)
    with T.precision("real64"):
        a = ann.astype("real64").run(x).logits.data
        s = snn.astype("real64").run(x).logits.data
    bound = np.abs(ann.layers[2].weight.data.astype(np.float64)).sum(axis=1) * 0.5 / 100
    assert np.all(np.abs(a - s) <= bound[None] + 1e-12)
    assert snn.layers[1].cfg.d_n == 511


def test_conversion_without_nonlinearity_is_identity(rng):
    ann = LayerGraph([Linear(4, 5, rng=rng), Head(5, 2, rng=rng)], (4,))
    x = rng.standard_normal((6, 4)).astype(np.float32)
    np.testing.assert_array_equal(convert_ann(ann).run(x).logits.data, ann.run(x).logits.data)


def test_relu_conversion_needs_calibration(rng):
    ann = _ann(rng, Activation("relu"))
    with pytest.raises(LoweringError, match="calibration"):
        convert_ann(ann)
    x = rng.standard_normal((200, 4)).astype(np.float32)
    snn = convert_ann(ann, N=100, calibration=x)
    cfg = snn.layers[1].cfg
    acts = ann.run(x, record=True).activations[1][0]
    assert cfg.D == pytest.approx(round(calibrate_ceiling(acts) * 100) / 100)


def test_converted_digits_cnn_keeps_accuracy():
    x, y = data.digits(400, seed=2)
    xtr, ytr, xte, yte = data.split(x, y, 0.25, seed=0)
    from ibrasnn.network import evaluate, fit
    ann = cnn(act=lambda: make_activation("clip", D=5.11), seed=0)
    fit(ann, xtr, ytr, epochs=8, lr=1e-2)
    snn = convert_ann(ann, N=100)
    assert abs(evaluate(snn, xte, yte) - evaluate(ann, xte, yte)) <= 0.01
    assert verify_equivalence(snn, lower_graph(snn), xte).passed
