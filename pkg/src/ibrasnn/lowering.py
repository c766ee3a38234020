"""Lowering trained graphs into accumulate-only, spike-driven inference graphs.

``lower_graph`` rewrites a training-mode :class:`~ibrasnn.network.LayerGraph`:

* BatchNorm folds into the preceding Conv/Linear.
* A synaptic layer fed by an IBRA-LIF neuron gets its weight divided by that
  neuron's ``N``; it then consumes the bit-planes of the integer code
  ``O * N`` and combines per-plane partial sums with shifts
  (``sum_b 2**b * P_b``, LSB first).
* A synaptic layer fed by an I-LIF neuron consumes the unary expansion of
  the integer activation: ``D`` planes summed without shifts.
* A synaptic layer fed by a LIF neuron consumes its single 0/1 plane.

Neuron layers keep their dynamics; the neuron itself decides how its
integer code is serialized into planes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .errors import LoweringError, VerificationError
from .network import (Activation, BatchNorm, Conv, Flatten, Head, LayerGraph, Linear, Neuron, Pool,
                      batchnorm_fold_params)
from .neuron import IBRA, ILIF, LIF, NeuronConfig, bits_for, codes_to_value, fire_codes

AC_KINDS = ("ac_conv", "ac_linear")
MAC_KINDS = ("mac_conv", "mac_linear")
PLANE_ORDER = "lsb_first"


# bit-plane and unary codecs -------------------------------------------------

def _scaled_codes(activation, n: int, d_n: int) -> np.ndarray:
    a = np.asarray(activation)
    if np.issubdtype(a.dtype, np.integer):
        codes = a.astype(np.int64)
    else:
        scaled = a.astype(np.float64) * n
        codes = np.rint(scaled)
        if a.size and np.max(np.abs(scaled - codes)) > 1e-6:
            raise LoweringError(f"activation * N is not integral (N={n}); max deviation "
                                f"{np.max(np.abs(scaled - codes)):.3g}")
        codes = codes.astype(np.int64)
    if a.size and (codes.min() < 0 or codes.max() > d_n):
        raise LoweringError(f"scaled activation outside [0, {d_n}]: range [{codes.min()}, {codes.max()}]")
    return codes.astype(np.int32)


def to_bitplanes(activation, n: int, d_n: int) -> np.ndarray:
    """Bit-planes of ``activation * N``: uint8 array ``[B, ...]`` with plane ``b`` weighted ``2**b``."""
    codes = _scaled_codes(activation, n, d_n)
    return kernels.bitplanes(codes, bits_for(d_n))


def reconstruct(planes: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_bitplanes`: ``sum_b 2**b * planes[b]`` as int64."""
    planes = np.asarray(planes, dtype=np.int64)
    out = np.zeros(planes.shape[1:], dtype=np.int64)
    for b in range(planes.shape[0]):
        out += planes[b] << b
    return out


def to_unary(activation, D: int) -> np.ndarray:
    """Unary expansion: value ``v`` becomes ``v`` ones followed by ``D - v`` zeros along axis 0."""
    codes = _scaled_codes(activation, 1, int(D))
    d = np.arange(int(D), dtype=np.int32).reshape((-1,) + (1,) * codes.ndim)
    return (codes[None] > d).astype(np.uint8)


@dataclass
class BitPlaneTrain:
    """Bit-planes of one neuron layer over time, ``bits`` shaped ``[T, B, ...]``."""

    bits: np.ndarray
    N: int
    nbits: int

    def reconstruct(self) -> np.ndarray:
        return np.stack([reconstruct(p) for p in self.bits])

    def values(self) -> np.ndarray:
        return self.reconstruct() / self.N


# lowered graph ---------------------------------------------------------------

@dataclass
class LoweredNode:
    kind: str
    origin: tuple[int, ...]
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    head: bool = False
    schedule: str | None = None  # bitplane | unary | binary, for AC nodes
    planes: int = 0  # planes consumed per timestep (AC nodes)
    in_scale: int = 1  # N of the feeding neuron (folded into weight)
    in_dn: int = 0  # largest integer code of the feeding neuron
    k: int = 0  # pool size
    cfg: NeuronConfig | None = None
    ops: tuple[str, ...] = ()

    def spec(self) -> dict:
        d = {"origin": list(self.origin)}
        if self.kind in AC_KINDS + MAC_KINDS:
            d.update(stride=self.stride, padding=self.padding, head=self.head, schedule=self.schedule,
                     planes=self.planes, in_scale=self.in_scale, in_dn=self.in_dn)
        if self.kind == "pool":
            d["k"] = self.k
        if self.kind == "neuron":
            d.update(config=self.cfg.to_dict(), N=self.cfg.N, B=self.cfg.nbits if self.cfg.kind != ILIF else None,
                     plane_order=PLANE_ORDER, expansion=_expansion(self.cfg))
        d["ops"] = list(self.ops)
        return d


def _expansion(cfg: NeuronConfig) -> str:
    return {IBRA: "bitplane", ILIF: "unary", LIF: "binary"}[cfg.kind]


def _planes_for(cfg: NeuronConfig) -> int:
    if cfg.kind == ILIF:
        return cfg.d_n
    if cfg.kind == LIF:
        return 1
    return cfg.nbits


@dataclass
class Capture:
    """What one synaptic node consumed at one timestep (for op counting)."""

    node: int
    t: int
    real: bool
    executed: bool
    codes: np.ndarray | None
    schedule: str | None
    planes: int
    in_shape: tuple


@dataclass
class LoweredResult:
    outputs: list[np.ndarray]
    logits: np.ndarray
    trace: dict[int, list[np.ndarray]] = field(default_factory=dict)
    trains: dict[int, BitPlaneTrain] = field(default_factory=dict)
    captures: list[Capture] = field(default_factory=list)


class LoweredGraph:
    mode = "lowered"

    def __init__(self, nodes: list[LoweredNode], input_shape, timesteps: int, encoding: str,
                 architecture: list[str], precision: str = "real64"):
        self.nodes = nodes
        self.input_shape = tuple(input_shape)
        self.timesteps = timesteps
        self.encoding = encoding
        self.architecture = list(architecture)
        self.precision = precision

    @property
    def dtype(self):
        return T.DTYPES[self.precision]

    def __repr__(self):
        return "LoweredGraph(\n  " + ",\n  ".join(f"{n.kind}{n.origin}" for n in self.nodes) + "\n)"

    def forward(self, x, trace: bool = False, capture: bool = False, trains: bool = False) -> LoweredResult:
        dt = self.dtype
        x = np.asarray(x, dtype=dt)
        if tuple(x.shape[1:]) != self.input_shape:
            raise LoweringError(f"input shape {x.shape[1:]} does not match graph input {self.input_shape}")
        states: dict[int, np.ndarray] = {}
        const_cache: dict[int, np.ndarray] = {}
        traced: dict[int, list[np.ndarray]] = {}
        planes_by_t: dict[int, list[np.ndarray]] = {}
        caps: list[Capture] = []
        outs = []
        first_real = next((j for j, n in enumerate(self.nodes) if n.kind in MAC_KINDS), None)
        for t in range(self.timesteps):
            h = x
            codes = None  # integer code of the spiking value flowing, None when h is real
            planes = None
            src_cfg = None
            for j, node in enumerate(self.nodes):
                if node.kind in MAC_KINDS:
                    reuse = self.encoding == "spike" and j == first_real and t > 0
                    if capture:
                        caps.append(Capture(j, t, True, not reuse, None, None, 0, h.shape[1:]))
                    if reuse:
                        h = const_cache[j]
                    else:
                        if node.kind == "mac_conv":
                            h = kernels.conv2d_forward(h, node.weight, node.stride, node.padding)
                            h = h + node.bias[None, :, None, None]
                        else:
                            h = h @ node.weight.T + node.bias
                        const_cache[j] = h
                elif node.kind in AC_KINDS:
                    if capture:
                        caps.append(Capture(j, t, False, True, codes, node.schedule, node.planes, codes.shape[1:]))
                    h = self._accumulate(node, planes, dt)
                    codes = planes = src_cfg = None
                elif node.kind == "pool":
                    k = node.k
                    B, C, H, W = h.shape
                    h = h.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5)).astype(dt)
                elif node.kind == "flatten":
                    if codes is not None:
                        codes = codes.reshape(codes.shape[0], -1)
                        planes = planes.reshape(planes.shape[0], planes.shape[1], -1)
                    else:
                        h = h.reshape(h.shape[0], -1)
                elif node.kind == "neuron":
                    cfg = node.cfg
                    v = states.get(j)
                    if v is None:
                        v_pre = h
                    elif cfg.alpha == 1.0:
                        v_pre = v + h
                    else:
                        v_pre = v * dt.type(cfg.alpha) + h
                    codes = fire_codes(v_pre, cfg)
                    states[j] = v_pre - codes_to_value(codes, cfg, dt)
                    src_cfg = cfg
                    planes = self._expand(codes, cfg)
                    if trains:
                        planes_by_t.setdefault(j, []).append(planes)
                    h = None
                if trace:
                    traced.setdefault(j, []).append(h if h is not None else codes)
            outs.append(h)
        logits = outs[0] if len(outs) == 1 else np.mean(np.stack(outs), axis=0).astype(dt)
        bp = {}
        if trains:
            for j, seq in planes_by_t.items():
                cfg = self.nodes[j].cfg
                bp[j] = BitPlaneTrain(np.stack(seq), cfg.N, _planes_for(cfg))
        return LoweredResult(outs, logits, traced, bp, caps)

    @staticmethod
    def _expand(codes: np.ndarray, cfg: NeuronConfig) -> np.ndarray:
        if cfg.kind == ILIF:
            return to_unary(codes, cfg.d_n)
        if cfg.kind == LIF:
            return codes[None].astype(np.uint8)
        return kernels.bitplanes(codes, cfg.nbits)

    @staticmethod
    def _accumulate(node: LoweredNode, planes: np.ndarray, dt) -> np.ndarray:
        P, B = planes.shape[0], planes.shape[1]
        flat = planes.reshape((P * B,) + planes.shape[2:])
        if node.kind == "ac_conv":
            partial = kernels.spike_conv2d(flat, node.weight, node.stride, node.padding)
        else:
            partial = kernels.spike_linear(flat, node.weight)
        partial = partial.reshape((P, B) + partial.shape[1:])
        acc = partial[0]
        for b in range(1, P):
            # shift-combine: ldexp is an exact exponent shift
            acc = acc + (np.ldexp(partial[b], b) if node.schedule == "bitplane" else partial[b])
        return (acc + _bias_view(node.bias, acc.ndim)).astype(dt)

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        preds = [self.forward(x[s:s + batch_size]).logits.argmax(axis=1) for s in range(0, len(x), batch_size)]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _bias_view(bias, ndim):
    return bias.reshape((1, -1) + (1,) * (ndim - 2))


# lowering ---------------------------------------------------------------------

def lower_graph(graph: LayerGraph, precision: str = "real64") -> LoweredGraph:
    """Compile a training-mode graph into its accumulate-only inference form.

    Weights are folded and divided by ``N`` in float64 and stored at
    ``precision``.
    """
    if getattr(graph, "mode", None) != "training":
        raise LoweringError("lower_graph expects a training-mode LayerGraph")
    dt = T.DTYPES[precision]
    layers = graph.layers
    nodes: list[LoweredNode] = []
    feeding: NeuronConfig | None = None  # neuron whose output is currently flowing
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, (Conv, Linear)):
            w = layer.weight.data.astype(np.float64)
            b = layer.bias.data.astype(np.float64) if layer.bias is not None else np.zeros(w.shape[0])
            origin = [i]
            if i + 1 < len(layers) and isinstance(layers[i + 1], BatchNorm):
                s, shift = batchnorm_fold_params(layers[i + 1])
                w = w * s.reshape((-1,) + (1,) * (w.ndim - 1))
                b = b * s + shift
                origin.append(i + 1)
                i += 1
            conv = isinstance(layer, Conv)
            node = LoweredNode(kind="", origin=tuple(origin), bias=b.astype(dt), head=isinstance(layer, Head),
                               stride=getattr(layer, "stride", 1), padding=getattr(layer, "padding", 0))
            if feeding is None:
                node.kind = "mac_conv" if conv else "mac_linear"
                node.ops = ("multiply", "accumulate")
            else:
                node.kind = "ac_conv" if conv else "ac_linear"
                node.schedule = _expansion(feeding)
                node.planes = _planes_for(feeding)
                node.in_scale = feeding.N
                node.in_dn = feeding.d_n
                node.ops = ("accumulate", "shift") if node.schedule == "bitplane" else ("accumulate",)
                if feeding.N != 1:
                    w = w / feeding.N
            node.weight = w.astype(dt)
            nodes.append(node)
            feeding = None
        elif isinstance(layer, BatchNorm):
            raise LoweringError(f"BatchNorm at layer {i} does not directly follow a Conv/Linear layer; cannot fold")
        elif isinstance(layer, Pool):
            if feeding is not None:
                raise LoweringError(f"Pool at layer {i} consumes spikes; place pooling before the neuron layer")
            nodes.append(LoweredNode(kind="pool", origin=(i,), k=layer.k, ops=("average",)))
        elif isinstance(layer, Flatten):
            nodes.append(LoweredNode(kind="flatten", origin=(i,), ops=("reshape",)))
        elif isinstance(layer, Neuron):
            nodes.append(LoweredNode(kind="neuron", origin=(i,), cfg=layer.cfg, ops=("integrate", "fire")))
            feeding = layer.cfg
        elif isinstance(layer, Activation):
            raise LoweringError(f"layer {i} is an ANN activation; convert the graph with convert_ann first")
        else:
            raise LoweringError(f"layer {i}: cannot lower {layer.kind}")
        i += 1
    return LoweredGraph(nodes, graph.input_shape, graph.timesteps, graph.encoding,
                        [l.kind for l in layers], precision)


def audit_accumulate_only(lowered: LoweredGraph) -> list[str]:
    """Structural scan for multiplications that consume neuron outputs.

    Dataflow is recomputed from node order: after a neuron node the flowing
    value is a spike train until the next synaptic node.  Returns a list of
    violations; empty means the graph is accumulate-only.
    """
    problems = []
    spiking = False
    for j, node in enumerate(lowered.nodes):
        if node.kind in ("batchnorm",):
            problems.append(f"node {j}: unfolded BatchNorm")
        if spiking:
            if node.kind in AC_KINDS:
                if "multiply" in node.ops:
                    problems.append(f"node {j} ({node.kind}) multiplies spike inputs")
                if node.schedule not in ("bitplane", "unary", "binary"):
                    problems.append(f"node {j} ({node.kind}) has no plane schedule")
                spiking = False
            elif node.kind == "flatten":
                pass
            else:
                problems.append(f"node {j} ({node.kind}) consumes spikes but is not an accumulate node")
                spiking = node.kind == "neuron"
        else:
            if node.kind in AC_KINDS:
                problems.append(f"node {j} ({node.kind}) expects spikes but receives a real-valued input")
        if node.kind == "neuron":
            spiking = True
    return problems


# equivalence ----------------------------------------------------------------------

@dataclass
class EquivalenceReport:
    max_abs_diff: float
    max_rel_diff: float
    passed: bool
    tol: float
    layer_rel_diff: dict[int, float]
    failing_layer: int | None

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = "" if self.failing_layer is None else f", first divergent layer {self.failing_layer}"
        return (f"{status}: max abs diff {self.max_abs_diff:.3e}, max rel diff {self.max_rel_diff:.3e} "
                f"(tol {self.tol:g}){where}")


def _rel(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(max abs diff, max over samples of ||a - b||_inf / ||a||_inf)."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if a.size == 0:
        return 0.0, 0.0
    d = np.abs(a - b).max(axis=1)
    ref = np.abs(a).max(axis=1)
    rel = np.where(ref > 0, d / np.where(ref > 0, ref, 1), np.where(d > 0, np.inf, 0.0))
    return float(d.max()), float(rel.max())


def verify_equivalence(trained: LayerGraph, lowered: LoweredGraph, corpus, tol: float = 1e-5,
                       batch_size: int = 64) -> EquivalenceReport:
    """Run the training-mode graph and the lowered graph on ``corpus`` and compare.

    The training graph is evaluated at the lowered graph's precision.  The
    relative difference is taken per sample as ``||a - b||_inf / ||a||_inf``.
    Per-layer differences locate the first synaptic layer that diverges.
    """
    if [l.kind for l in trained.layers] != lowered.architecture:
        raise VerificationError("architecture mismatch between trained and lowered graphs")
    ref = trained.astype(lowered.precision)
    corpus = np.asarray(corpus)
    max_abs = max_rel = 0.0
    layer_rel: dict[int, float] = {}
    for s in range(0, len(corpus), batch_size):
        xb = corpus[s:s + batch_size]
        a = ref.run(xb, trace=True)
        b = lowered.forward(xb, trace=True)
        d_abs, d_rel = _rel(a.logits.data, b.logits)
        max_abs, max_rel = max(max_abs, d_abs), max(max_rel, d_rel)
        for j, node in enumerate(lowered.nodes):
            if node.kind not in AC_KINDS + MAC_KINDS:
                continue
            o = node.origin[-1]
            for t in range(lowered.timesteps):
                _, r = _rel(a.trace[o][t], b.trace[j][t])
                layer_rel[node.origin[0]] = max(layer_rel.get(node.origin[0], 0.0), r)
    failing = next((k for k in sorted(layer_rel) if layer_rel[k] > tol), None)
    passed = max_rel <= tol
    if passed:
        failing = None
    return EquivalenceReport(max_abs, max_rel, passed, tol, layer_rel, failing)


# ANN-to-SNN conversion ---------------------------------------------------------------

def calibrate_ceiling(values: np.ndarray, percentile: float = 99.9) -> float:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise LoweringError("empty calibration activations")
    return float(np.percentile(v, percentile))


def convert_ann(ann: LayerGraph, N: int = 100, calibration=None, percentile: float = 99.9) -> LayerGraph:
    """Replace every clipped/ReLU activation by an IBRA-LIF neuron with ``T = 1``.

    Clip activations keep their ceiling as ``D``.  ReLU activations need
    ``calibration`` inputs; their ceiling is the given percentile of the
    observed activations.  ``D`` is snapped to ``round(D * N) / N``.
    """
    if any(isinstance(l, Neuron) for l in ann.layers):
        raise LoweringError("convert_ann expects an ANN without neuron layers")
    ceilings: dict[int, float] = {}
    needs_cal = [i for i, l in enumerate(ann.layers) if isinstance(l, Activation) and l.fn == "relu"]
    if needs_cal:
        if calibration is None:
            raise LoweringError(f"unbounded ReLU at layers {needs_cal} and no calibration data")
        rec = ann.run(np.asarray(calibration), record=True)
        for i in needs_cal:
            ceilings[i] = calibrate_ceiling(np.concatenate([a.reshape(-1) for a in rec.activations[i]]), percentile)
    layers = []
    for i, l in enumerate(ann.copy().layers):
        if isinstance(l, Activation):
            d = l.ceiling if l.fn == "clip" else ceilings[i]
            d_n = max(1, int(round(d * N)))
            layers.append(Neuron(NeuronConfig.ibra(D=d_n / N, N=N, alpha=1.0, T=1)))
        else:
            layers.append(l)
    return LayerGraph(layers, ann.input_shape, ann.encoding)
