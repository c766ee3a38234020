import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ibrasnn.network import (BatchNorm, Conv, Flatten, Head, LayerGraph, Linear, Neuron,  # noqa: E402
                             Pool)
from ibrasnn.neuron import NeuronConfig  # noqa: E402

DN_PAIRS = [(1.5, 10), (3.1, 10), (6.3, 10), (1.27, 100), (2.55, 100), (5.11, 100),
          (1.023, 1000), (2.047, 1000), (4.095, 1000), (8.191, 1000)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_bn(layer: BatchNorm, rng):
    c = layer.channels
    layer.gamma.assign(rng.uniform(0.5, 2.0, c))
    layer.beta.assign(rng.uniform(-0.5, 1.5, c))
    layer.running_mean = rng.normal(0, 0.5, c).astype(layer.running_mean.dtype)
    layer.running_var = rng.uniform(0.2, 3.0, c).astype(layer.running_var.dtype)


def random_graph(rng, *, max_synaptic=5, max_width=64, timesteps=None, kinds=("ibra",), encoding="direct"):
    """A random conv/linear/BN/neuron graph with 2 to ``max_synaptic`` synaptic layers."""
    n_syn = int(rng.integers(2, max_synaptic + 1))
    n_conv = int(rng.integers(0, n_syn))  # the head is always linear
    T = int(timesteps if timesteps is not None else rng.integers(1, 3))

    def neuron():
        kind = kinds[int(rng.integers(len(kinds)))]
        alpha = float(rng.choice([1.0, 0.5, 0.75]))
        if kind == "ilif":
            return Neuron(NeuronConfig.ilif(D=int(rng.integers(1, 9)), alpha=alpha, T=T))
        D, N = DN_PAIRS[int(rng.integers(len(DN_PAIRS)))]
        return Neuron(NeuronConfig.ibra(D=D, N=N, alpha=alpha, T=T))

    layers = []
    c, h = int(rng.integers(1, 4)), int(rng.choice([6, 8]))
    input_shape = (c, h, h) if n_conv else (int(rng.integers(2, max_width + 1)),)
    for _ in range(n_conv):
        out = int(rng.integers(2, min(16, max_width) + 1))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 1, 2])) if h >= 4 else 1
        conv = Conv(c, out, k, stride, k // 2, rng=rng)
        conv.weight.assign(conv.weight.data * rng.uniform(1, 3))
        layers.append(conv)
        h = (h + 2 * (k // 2) - k) // stride + 1
        if rng.random() < 0.7:
            bn = BatchNorm(out)
            randomize_bn(bn, rng)
            layers.append(bn)
        if h % 2 == 0 and h >= 4 and rng.random() < 0.5:
            layers.append(Pool(2))
            h //= 2
        layers.append(neuron())
        c = out
    width = c * h * h if n_conv else input_shape[0]
    if n_conv:
        layers.append(Flatten())
    for _ in range(n_syn - n_conv - 1):
        out = int(rng.integers(2, max_width + 1))
        lin = Linear(width, out, rng=rng)
        lin.weight.assign(lin.weight.data * rng.uniform(1, 3))
        lin.bias.assign(rng.normal(0, 0.5, out))
        layers.append(lin)
        if rng.random() < 0.7:
            bn = BatchNorm(out)
            randomize_bn(bn, rng)
            layers.append(bn)
        layers.append(neuron())
        width = out
    layers.append(Head(width, int(rng.integers(2, 11)), rng=rng))
    return LayerGraph(layers, input_shape, encoding=encoding)


def random_inputs(graph, n, rng, scale=2.0):
    return (rng.standard_normal((n,) + graph.input_shape) * scale).astype(np.float32)


# acceptance report ------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
