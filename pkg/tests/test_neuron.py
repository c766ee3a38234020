import numpy as np
import pytest

from ibrasnn import neuron as nr
from ibrasnn import tensor as T
from ibrasnn.neuron import NeuronConfig, NeuronState
from ibrasnn.tensor import Tape, Tensor

from conftest import DN_PAIRS
from oracles import ibra_scalar, lif_scalar


def t64(v):
    return Tensor(np.atleast_1d(np.asarray(v, dtype=np.float64)), dtype="real64")


def run_stream(cfg, stream):
    state, outs = None, []
    for i in stream:
        o, state = nr.step(state, t64(i), cfg)
        outs.append(float(o.data[0]))
    return outs, state


# LIF ------------------------------------------------------------------------------

def test_lif_example():
    cfg = NeuronConfig.lif(alpha=0.5, v_th=1.0)
    o, st = nr.lif_step(NeuronState(t64(0.5)), t64(0.8), cfg)
    assert o.data[0] == 1.0
    assert st.v.data[0] == pytest.approx(0.05)


def test_lif_silent():
    o, st = nr.lif_step(None, t64(0.0), NeuronConfig.lif())
    assert o.data[0] == 0.0 and st.v.data[0] == 0.0


def test_lif_matches_scalar_reference(rng):
    stream = rng.uniform(0, 1.2, 100)
    cfg = NeuronConfig.lif(alpha=0.5, v_th=1.0)
    outs, _ = run_stream(cfg, stream)
    assert outs == lif_scalar(stream, 0.5, 1.0)
    assert sum(outs) == sum(lif_scalar(stream, 0.5, 1.0))


# I-LIF ------------------------------------------------------------------------------

@pytest.mark.parametrize("v_pre,expected", [(2.6, 3.0), (7.2, 4.0), (-0.4, 0.0), (2.5, 3.0), (0.49, 0.0)])
def test_ilif_round_clip(v_pre, expected):
    o, st = nr.ilif_step(None, t64(v_pre), NeuronConfig.ilif(D=4))
    assert o.data[0] == expected
    assert st.v.data[0] == pytest.approx(v_pre - expected)


# IBRA-LIF ---------------------------------------------------------------------------

def test_ibra_small_value():
    o, _ = nr.ibra_step(None, t64(0.01234), NeuronConfig.ibra(D=5.11, N=100))
    assert o.data[0] == pytest.approx(0.01)


def test_ibra_saturates_at_ceiling():
    cfg = NeuronConfig.ibra(D=5.11, N=100)
    o, st = nr.ibra_step(None, t64(9.0), cfg)
    assert nr.fire_codes(np.array([9.0]), cfg)[0] == 511
    assert o.data[0] == pytest.approx(5.11)
    assert st.v.data[0] == pytest.approx(9.0 - 5.11)


@pytest.mark.parametrize("D,N", DN_PAIRS)
def test_ceilings_and_bits(D, N):
    cfg = NeuronConfig.ibra(D=D, N=N)
    assert cfg.d_n == 2 ** cfg.nbits - 1
    assert cfg.nbits == nr.bits_for(cfg.d_n)


def test_ibra_with_unit_scale_equals_ilif(rng):
    stream = rng.uniform(-1, 6, 50)
    a, _ = run_stream(NeuronConfig.ibra(D=4, N=1, alpha=0.75), stream)
    b, _ = run_stream(NeuronConfig.ilif(D=4, alpha=0.75), stream)
    assert a == b


@pytest.mark.parametrize("D,N", [(1.5, 10), (5.11, 100), (4.095, 1000)])
def test_ibra_matches_scalar_reference(rng, D, N):
    stream = rng.uniform(-1, D + 1, 60)
    outs, _ = run_stream(NeuronConfig.ibra(D=D, N=N, alpha=0.5), stream)
    np.testing.assert_allclose(outs, ibra_scalar(stream, D, N, alpha=0.5), rtol=0, atol=1e-12)


def test_ibra_values_on_grid(rng):
    cfg = NeuronConfig.ibra(D=2.55, N=100)
    o, _ = nr.ibra_step(None, t64(rng.uniform(-2, 5, 1000)), cfg)
    codes = o.data * 100
    np.testing.assert_allclose(codes, np.rint(codes), atol=1e-9)
    assert codes.min() >= 0 and codes.max() <= 255


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(nr.round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -1.5])),
                                  [1, 2, 3, -1, -2])


def test_step_kind_mismatch():
    with pytest.raises(ValueError):
        nr.lif_step(None, t64(1.0), NeuronConfig.ibra())


@pytest.mark.parametrize("kw", [dict(kind="X"), dict(alpha=0), dict(alpha=1.5), dict(T=0), dict(N=0),
                                dict(D=0.001, N=1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        NeuronConfig(**kw)


def test_config_round_trip():
    cfg = NeuronConfig.ibra(D=2.047, N=1000, alpha=0.5, T=2)
    assert NeuronConfig.from_dict(cfg.to_dict()) == cfg


# surrogate window ----------------------------------------------------------------------

@pytest.mark.parametrize("D,N", DN_PAIRS)
def test_surrogate_window_is_boxcar(rng, D, N):
    cfg = NeuronConfig.ibra(D=D, N=N)
    with T.precision("real64"):
        v = T.parameter(rng.uniform(-1, D + 1, 1000))
        with Tape() as tape:
            o, _ = nr.ibra_step(None, v, cfg)
            loss = T.sum(o)
        g = tape.backward(loss)[v.id].data
    expected = np.where((v.data >= 0) & (v.data <= D), 1.0, 0.0)
    np.testing.assert_array_equal(g, expected)


def test_lif_window():
    w = nr.surrogate_window(np.array([0.4, 0.5, 1.0, 1.5, 1.6]), NeuronConfig.lif())
    assert w.tolist() == [0, 1, 1, 1, 0]


# encodings --------------------------------------------------------------------------------

def test_encode_direct():
    img = t64([1.0, 2.0])
    assert nr.encode_direct(img, 1) == [img]
    copies = nr.encode_direct(img, 3)
    assert len(copies) == 3 and all(c.data.tobytes() == img.data.tobytes() for c in copies)
    with pytest.raises(ValueError):
        nr.encode_direct(img, 0)


def test_spike_encoding_zero_image():
    outs = nr.encode_spike_first_layer(t64(np.zeros(4)), NeuronConfig.lif(T=3))
    assert all(not o.data.any() for o in outs)


def test_spike_encoding_threshold_image():
    outs = nr.encode_spike_first_layer(t64([1.0]), NeuronConfig.lif(alpha=1.0, v_th=1.0, T=2))
    assert [o.data[0] for o in outs] == [1.0, 1.0]


@pytest.mark.parametrize("cfg", [NeuronConfig.lif(T=4), NeuronConfig.ibra(D=1.27, N=100, alpha=0.5, T=3)])
def test_spike_encoding_equals_manual_unroll(rng, cfg):
    img = t64(rng.uniform(0, 2, 20))
    outs = nr.encode_spike_first_layer(img, cfg)
    state, manual = None, []
    for _ in range(cfg.T):
        o, state = nr.step(state, img, cfg)
        manual.append(o.data)
    for a, b in zip(outs, manual):
        np.testing.assert_array_equal(a.data, b)
