"""Layer graphs, temporal unrolling and training.

A :class:`LayerGraph` is an ordered list of layers run once per timestep.
Neuron layers keep their membrane state across the ``T`` timesteps of one
sample and start from zero for every new batch.  The classification
readout is the mean of the head outputs over timesteps.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import NonFiniteError, ShapeError
from .neuron import IBRA, ILIF, LIF, NeuronConfig, step
from .tensor import Tape, Tensor


class Layer:
    kind = "Layer"

    def params(self) -> dict[str, Tensor]:
        return {}

    def spec(self) -> dict:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def __repr__(self):
        fields = ", ".join(f"{k}={v}" for k, v in self.spec().items())
        return f"{self.kind}({fields})"


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in) / np.sqrt(2.0)
    return rng.uniform(-bound, bound, size=shape)


class Conv(Layer):
    kind = "Conv"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=True, rng=None):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = T.parameter(_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = T.parameter(np.zeros(out_channels)) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def spec(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels, kernel_size=self.kernel_size,
                    stride=self.stride, padding=self.padding, bias=self.bias is not None)

    def forward(self, x, train):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_hw(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class Linear(Layer):
    kind = "Linear"

    def __init__(self, in_features, out_features, bias=True, rng=None):
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = T.parameter(_uniform(rng, (out_features, in_features), in_features))
        self.bias = T.parameter(np.zeros(out_features)) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def spec(self):
        return dict(in_features=self.in_features, out_features=self.out_features, bias=self.bias is not None)

    def forward(self, x, train):
        return T.linear(x, self.weight, self.bias)


class Head(Linear):
    """Final linear readout; its outputs are averaged over timesteps."""

    kind = "Head"


class BatchNorm(Layer):
    kind = "BatchNorm"

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        if eps < 0:
            raise ValueError(f"BatchNorm eps must be non-negative, got {eps}")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = T.parameter(np.ones(channels))
        self.beta = T.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def spec(self):
        return dict(channels=self.channels, eps=self.eps, momentum=self.momentum)

    def forward(self, x, train):
        if train:
            y, mu, var = T.batch_norm_train(x, self.gamma, self.beta, self.eps)
            n = x.size // x.shape[1]
            unbiased = var * (n / max(n - 1, 1))
            m = self.momentum
            dt = self.running_mean.dtype
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(dt)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(dt)
            return y
        return T.batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)


def batchnorm_fold_params(bn: BatchNorm) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel ``(scale, shift)`` so that ``bn(y) == scale * y + shift`` in eval mode."""
    if bn.eps < 0:
        raise ValueError(f"cannot fold BatchNorm with eps={bn.eps}")
    var = np.asarray(bn.running_var, dtype=np.float64)
    if bn.eps == 0 and np.any(var == 0):
        raise ValueError("cannot fold BatchNorm: zero variance with eps=0")
    gamma = bn.gamma.data.astype(np.float64)
    s = gamma / np.sqrt(var + bn.eps)
    return s, bn.beta.data.astype(np.float64) - s * np.asarray(bn.running_mean, dtype=np.float64)


class Neuron(Layer):
    kind = "Neuron"

    def __init__(self, cfg: NeuronConfig):
        self.cfg = cfg

    def spec(self):
        return {"config": self.cfg.to_dict()}


class Activation(Layer):
    """ANN nonlinearity: ``relu`` or ``clip`` to ``[0, ceiling]``."""

    kind = "Activation"

    def __init__(self, fn="relu", ceiling=None):
        if fn not in ("relu", "clip"):
            raise ValueError(f"unknown activation {fn!r}")
        if fn == "clip" and (ceiling is None or ceiling <= 0):
            raise ValueError("clip activation needs a positive ceiling")
        self.fn, self.ceiling = fn, ceiling

    def spec(self):
        return {"fn": self.fn, "ceiling": self.ceiling}

    def forward(self, x, train):
        if self.fn == "relu":
            return T.relu(x)
        return T.clip(x, 0.0, self.ceiling)


class Pool(Layer):
    """Average pooling over ``k x k`` windows."""

    kind = "Pool"

    def __init__(self, k=2):
        self.k = k

    def spec(self):
        return {"k": self.k}

    def forward(self, x, train):
        return T.avg_pool2d(x, self.k)


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, x, train):
        return T.flatten(x)


LAYER_TYPES = {cls.kind: cls for cls in (Conv, Linear, Head, BatchNorm, Neuron, Activation, Pool, Flatten)}
SYNAPTIC = ("Conv", "Linear", "Head")


@dataclass
class ForwardResult:
    outputs: list[Tensor]
    logits: Tensor
    activations: dict[int, list[np.ndarray]] = field(default_factory=dict)
    trace: dict[int, list[np.ndarray]] = field(default_factory=dict)


class LayerGraph:
    """Ordered layers plus the per-sample input shape.

    ``encoding`` is ``"direct"`` (the real input is presented at every
    timestep) or ``"spike"`` (the first real-valued layer is evaluated once
    and held as a constant current).  Both compute the same outputs; the
    distinction only matters for energy accounting.
    """

    mode = "training"

    def __init__(self, layers: list[Layer], input_shape, encoding: str = "direct"):
        if encoding not in ("direct", "spike"):
            raise ValueError(f"unknown encoding {encoding!r}")
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.encoding = encoding
        steps = {l.cfg.T for l in self.layers if isinstance(l, Neuron)}
        if len(steps) > 1:
            raise ValueError(f"neuron layers disagree on T: {sorted(steps)}")
        self.timesteps = steps.pop() if steps else 1

    def __repr__(self):
        return "LayerGraph(\n  " + ",\n  ".join(repr(l) for l in self.layers) + "\n)"

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                p.name = f"{i}.{name}"
                out.append((p.name, p))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def neuron_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Neuron)]

    def copy(self) -> "LayerGraph":
        return copy.deepcopy(self)

    def astype(self, precision: str) -> "LayerGraph":
        """Deep copy with parameters and buffers cast to ``real32`` or ``real64``."""
        dt = T.DTYPES[precision]
        g = self.copy()
        for layer in g.layers:
            for name, p in layer.params().items():
                setattr(layer, name, T.parameter(p.data.astype(dt), name=p.name, dtype=precision))
            if isinstance(layer, BatchNorm):
                layer.running_mean = layer.running_mean.astype(dt)
                layer.running_var = layer.running_var.astype(dt)
        return g

    def with_neurons(self, make: Callable[[Neuron | Activation], Layer]) -> "LayerGraph":
        """Copy with every Neuron/Activation layer replaced by ``make(layer)``."""
        g = self.copy()
        g.layers = [make(l) if isinstance(l, (Neuron, Activation)) else l for l in g.layers]
        return LayerGraph(g.layers, g.input_shape, g.encoding)

    # execution -------------------------------------------------------------

    def forward_t(self, inputs: list[Tensor], train: bool = False, record: bool = False,
                  trace: bool = False) -> ForwardResult:
        """Run every timestep with persistent neuron state; readout is the mean over T.

        ``record`` keeps each Neuron/Activation output, ``trace`` keeps every
        layer's output, both as ``{layer index: [array per timestep]}``.
        """
        if not inputs:
            raise ValueError("forward_t needs at least one timestep")
        states: dict[int, object] = {}
        acts: dict[int, list[np.ndarray]] = {}
        traced: dict[int, list[np.ndarray]] = {}
        outputs = []
        for x in inputs:
            if tuple(x.shape[1:]) != self.input_shape:
                raise ShapeError(f"layer 0: input shape {x.shape[1:]} does not match graph input {self.input_shape}")
            h = x
            for i, layer in enumerate(self.layers):
                try:
                    if isinstance(layer, Neuron):
                        h, states[i] = step(states.get(i), h, layer.cfg)
                        if record:
                            acts.setdefault(i, []).append(h.data)
                    else:
                        h = layer.forward(h, train)
                        if record and isinstance(layer, Activation):
                            acts.setdefault(i, []).append(h.data)
                except ShapeError as exc:
                    raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from exc
                if trace:
                    traced.setdefault(i, []).append(h.data)
            outputs.append(h)
        logits = outputs[0] if len(outputs) == 1 else T.mean_of(outputs)
        return ForwardResult(outputs, logits, acts, traced)

    def run(self, x, train: bool = False, record: bool = False, trace: bool = False) -> ForwardResult:
        """Forward a batch of raw inputs, presented at every timestep."""
        if not isinstance(x, Tensor):
            dt = self.param_dtype()
            x = Tensor(np.asarray(x, dtype=dt), dtype=T.dtype_name(dt))
        xt = x
        return self.forward_t([xt] * self.timesteps, train=train, record=record, trace=trace)

    def param_dtype(self):
        ps = self.parameters()
        return ps[0].data.dtype if ps else T.default_real()

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        preds = []
        for s in range(0, len(x), batch_size):
            preds.append(self.run(x[s:s + batch_size]).logits.data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# training -----------------------------------------------------------------

def evaluate(graph: LayerGraph, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(graph.predict(x, batch_size) == y))


def _grad_stats(graph: LayerGraph, grads: dict) -> dict[str, float]:
    out = {}
    for name, p in graph.named_parameters():
        g = grads.get(p.id)
        out[name] = float(np.max(np.abs(g.data))) if g is not None and g.size else 0.0
    return out


def train_step(graph: LayerGraph, xb: np.ndarray, yb: np.ndarray, optimizer, loss_fn=T.cross_entropy):
    """One optimizer update on a minibatch; returns (loss, n_correct, grad max per parameter)."""
    with Tape() as tape:
        res = graph.run(xb, train=True)
        loss = loss_fn(res.logits, yb)
    grads = tape.backward(loss)
    stats = _grad_stats(graph, grads)
    lv = float(loss.data)
    if not np.isfinite(lv):
        worst = max(stats, key=lambda k: stats[k] if np.isfinite(stats[k]) else np.inf) if stats else None
        raise NonFiniteError(f"non-finite loss {lv}", layer=worst, report=stats)
    optimizer.step(graph.parameters(), grads)
    correct = int(np.sum(res.logits.data.argmax(axis=1) == yb))
    return lv, correct, stats


def train_epoch(graph: LayerGraph, x: np.ndarray, y: np.ndarray, optimizer, rng: np.random.Generator,
                batch_size: int = 32, loss_fn=T.cross_entropy) -> dict:
    """One shuffled pass over ``(x, y)``.

    Returns ``{"loss", "accuracy", "grad_max"}`` where ``grad_max`` maps each
    parameter name to the largest absolute gradient seen during the epoch.
    """
    order = rng.permutation(len(x))
    total, correct, seen = 0.0, 0, 0
    grad_max: dict[str, float] = {}
    for s in range(0, len(x), batch_size):
        idx = order[s:s + batch_size]
        lv, c, stats = train_step(graph, x[idx], y[idx], optimizer, loss_fn)
        total += lv * len(idx)
        correct += c
        seen += len(idx)
        for k, v in stats.items():
            grad_max[k] = max(grad_max.get(k, 0.0), v)
    return {"loss": total / max(seen, 1), "accuracy": correct / max(seen, 1), "grad_max": grad_max}


# presets ------------------------------------------------------------------

def make_activation(kind: str, *, D=5.11, N=100, T_steps=1, alpha=None, v_th=1.0) -> Layer:
    """Factory for the nonlinearity used by the presets.

    ``kind`` is one of ``ibra``, ``ilif``, ``lif``, ``relu``, ``clip``.
    """
    kind = kind.lower()
    if kind == "ibra":
        return Neuron(NeuronConfig.ibra(D=D, N=N, alpha=1.0 if alpha is None else alpha, T=T_steps))
    if kind == "ilif":
        return Neuron(NeuronConfig.ilif(D=int(round(D)), alpha=1.0 if alpha is None else alpha, T=T_steps))
    if kind == "lif":
        return Neuron(NeuronConfig.lif(alpha=0.5 if alpha is None else alpha, v_th=v_th, T=T_steps))
    if kind == "relu":
        return Activation("relu")
    if kind == "clip":
        return Activation("clip", ceiling=D)
    raise ValueError(f"unknown neuron kind {kind!r}")


def mlp(in_features: int, classes: int, hidden=(64, 64), act: Callable[[], Layer] | None = None,
        seed: int = 0, batchnorm: bool = True) -> LayerGraph:
    rng = np.random.default_rng(seed)
    act = act or (lambda: make_activation("ibra"))
    layers: list[Layer] = []
    width = in_features
    for h in hidden:
        layers.append(Linear(width, h, rng=rng))
        if batchnorm:
            layers.append(BatchNorm(h))
        layers.append(act())
        width = h
    layers.append(Head(width, classes, rng=rng))
    return LayerGraph(layers, (in_features,))


def cnn(input_shape=(1, 8, 8), classes: int = 10, channels=(8, 16), act: Callable[[], Layer] | None = None,
        seed: int = 0, encoding: str = "direct") -> LayerGraph:
    rng = np.random.default_rng(seed)
    act = act or (lambda: make_activation("ibra"))
    c, h, w = input_shape
    layers: list[Layer] = []
    for ch in channels:
        layers += [Conv(c, ch, 3, 1, 1, rng=rng), BatchNorm(ch), Pool(2), act()]
        c, h, w = ch, h // 2, w // 2
    layers += [Flatten(), Head(c * h * w, classes, rng=rng)]
    return LayerGraph(layers, input_shape, encoding=encoding)


def fit(graph: LayerGraph, x, y, *, epochs=30, lr=1e-2, batch_size=32, seed=0, optimizer=None,
        on_epoch: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Train with Adam (unless ``optimizer`` is given); returns per-epoch metrics."""
    from .optim import Adam

    opt = optimizer or Adam(lr)
    rng = np.random.default_rng(seed)
    history = []
    for ep in range(epochs):
        m = train_epoch(graph, x, y, opt, rng, batch_size)
        history.append(m)
        if on_epoch:
            on_epoch(ep, m)
    return history


__all__ = [
    "Activation", "BatchNorm", "Conv", "Flatten", "ForwardResult", "Head", "Layer", "LayerGraph", "Linear",
    "Neuron", "Pool", "batchnorm_fold_params", "cnn", "evaluate", "fit", "make_activation", "mlp",
    "train_epoch", "train_step", "IBRA", "ILIF", "LIF",
]
