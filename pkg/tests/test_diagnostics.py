import numpy as np
import pytest

from ibrasnn import data
from ibrasnn.diagnostics import (grad_report_csv, gradient_scaling_probe, nonfinite_events, paired_range_runs,
                                 range_coverage, standardize, weight_grad_for_activation)
from ibrasnn.network import Head, LayerGraph, Linear, Neuron, fit, mlp
from ibrasnn.neuron import NeuronConfig


def test_zero_input_covers_only_code_zero():
    g = LayerGraph([Linear(3, 4, bias=False), Neuron(NeuronConfig.ibra(D=15, N=1)), Head(4, 2)], (3,))
    rep = range_coverage(g, np.zeros((10, 3), dtype=np.float32))
    (layer,) = rep.layers
    assert layer.histogram[0] == 40 and layer.histogram[1:].sum() == 0
    assert layer.achieved_max == 0 and layer.coverage == pytest.approx(1 / 16)


def test_coverage_bounds(rng):
    g = mlp(2, 2, hidden=(16, 16), act=lambda: Neuron(NeuronConfig.ibra(D=0.15, N=100)))
    rep = range_coverage(g, rng.standard_normal((200, 2)) * 3, label="x")
    for l in rep.layers:
        assert 0 <= l.coverage <= 1 and l.achieved_max <= l.d_n == 15
        assert l.histogram.sum() == 200 * 16
    assert rep.summary_csv().splitlines()[0] == "run,layer,d_n,achieved_max,distinct,coverage"
    assert len(rep.histogram_csv().splitlines()) == 1 + 2 * 16
    assert "coverage" in rep.text()


def test_standardize(rng):
    x = rng.standard_normal((50, 3)) * [1, 5, 0] + [2, -1, 7]
    xs, stats = standardize(x)
    np.testing.assert_allclose(xs[:, :2].mean(0), 0, atol=1e-6)
    np.testing.assert_allclose(xs[:, :2].std(0), 1, atol=1e-5)
    assert np.all(xs[:, 2] == 0)
    np.testing.assert_array_equal(standardize(x, stats)[0], xs)


def test_paired_runs_share_ceiling():
    x, y = data.blobs(120, k=3, seed=0)
    without, with_ra, hist = paired_range_runs(x, y, D=15, N=100, epochs=2)
    assert [l.d_n for l in without.layers] == [l.d_n for l in with_ra.layers] == [15, 15]
    assert set(hist) == {"without-RA", "with-RA"}


def test_probe_scales_with_activation():
    p = gradient_scaling_probe(d_n=15)
    assert p["ratio"] == pytest.approx(15.0, rel=1e-12)
    assert p["grad_zero"] == 0.0


def test_weight_grad_is_outer_product(rng):
    a, w, up = rng.standard_normal(5), rng.standard_normal((3, 5)), rng.standard_normal(3)
    np.testing.assert_allclose(weight_grad_for_activation(a, w, up), np.outer(up, a), rtol=1e-12)


def test_grad_report_of_stable_run():
    x, y = data.blobs(64, seed=1)
    hist = fit(mlp(2, 2, hidden=(8,)), x, y, epochs=3)
    csv = grad_report_csv(hist)
    rows = csv.splitlines()[1:]
    assert rows and all(r.endswith(",1") for r in rows)
    assert nonfinite_events(hist) == []


def test_nonfinite_events_flagged():
    hist = [{"grad_max": {"0.weight": 1.0}}, {"grad_max": {"0.weight": float("inf")}}]
    assert nonfinite_events(hist) == [(1, "0.weight")]
    assert grad_report_csv(hist).splitlines()[-1].endswith(",0")
