"""Synaptic operation counting and energy pricing.

Only synaptic operations are counted: a MAC for every real-valued
input/weight product, an AC for every synapse reached by a 1-bit.  BN,
pooling and neuron-update arithmetic are excluded.

Counting rules
--------------
* Real-valued input: every connected (input, weight) pair costs one MAC.
  With ``encoding="spike"`` the first real-valued layer is evaluated once
  and held as a constant current, otherwise once per timestep.
* Spike input, bit-plane schedule: every set bit of ``O * N`` triggers its
  fan-out, so one element costs ``popcount(O * N) * fan_out`` ACs.
* Spike input, unary schedule: the integer ``v`` becomes ``v`` spikes and
  costs ``v * fan_out`` ACs.
"""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .lowering import AC_KINDS, MAC_KINDS, LoweredGraph, _planes_for
from .network import SYNAPTIC, Activation, Conv, Flatten, LayerGraph, Neuron
from .neuron import IBRA, ILIF, LIF, NeuronConfig

EXCLUSIONS = "Synaptic operations only: BatchNorm, pooling and neuron-update arithmetic are excluded."


def fanout_map(kind: str, in_shape: tuple, *, out_features=None, out_channels=None, kernel_size=None,
               stride=1, padding=0) -> np.ndarray:
    """Number of synapses each input element drives, shaped like one input sample."""
    if kind in ("linear", "Linear", "Head", "ac_linear", "mac_linear"):
        return np.full(in_shape, int(out_features), dtype=np.int64)
    C, H, W = in_shape
    k = kernel_size

    def axis_counts(n):
        on = (n + 2 * padding - k) // stride + 1
        counts = np.zeros(n, dtype=np.int64)
        for o in range(on):
            for i in range(k):
                pos = o * stride + i - padding
                if 0 <= pos < n:
                    counts[pos] += 1
        return counts

    per_pos = np.outer(axis_counts(H), axis_counts(W))
    return np.broadcast_to(out_channels * per_pos, (C, H, W)).copy()


@dataclass
class OpLedger:
    """Counts keyed by ``(layer, timestep, plane)``; plane ``-1`` holds MACs."""

    counts: dict = field(default_factory=lambda: defaultdict(lambda: [0, 0]))

    def add(self, layer: int, t: int, plane: int, macs: int = 0, acs: int = 0) -> None:
        if macs < 0 or acs < 0:
            raise ValueError("operation counts must be non-negative")
        c = self.counts[(layer, t, plane)]
        c[0] += int(macs)
        c[1] += int(acs)

    @property
    def macs(self) -> int:
        return sum(v[0] for v in self.counts.values())

    @property
    def acs(self) -> int:
        return sum(v[1] for v in self.counts.values())

    def layer_totals(self) -> dict[int, tuple[int, int]]:
        out: dict[int, list[int]] = defaultdict(lambda: [0, 0])
        for (layer, _, _), (m, a) in self.counts.items():
            out[layer][0] += m
            out[layer][1] += a
        return {k: tuple(v) for k, v in sorted(out.items())}

    def __add__(self, other: "OpLedger") -> "OpLedger":
        res = OpLedger()
        for src in (self, other):
            for (l, t, p), (m, a) in src.counts.items():
                res.add(l, t, p, m, a)
        return res

    def as_dict(self) -> dict:
        return {k: tuple(v) for k, v in sorted(self.counts.items())}


# counting ---------------------------------------------------------------------------

def _count_spiking(ledger, layer, t, codes, fanout, schedule, planes):
    codes = np.asarray(codes, dtype=np.int64)
    fo = np.broadcast_to(fanout, codes.shape[1:]).reshape(-1)
    c = codes.reshape(len(codes), -1)
    if schedule == "unary":
        # acs for plane d = sum of fanout over elements with value > d
        hist = np.zeros(planes + 1, dtype=np.int64)
        np.add.at(hist, np.minimum(c, planes).reshape(-1), np.tile(fo, len(c)))
        above = hist[::-1].cumsum()[::-1]
        for d in range(planes):
            if above[d + 1]:
                ledger.add(layer, t, d, acs=int(above[d + 1]))
        return
    bits = kernels.bitplanes(c.astype(np.int32), planes)
    for b in range(planes):
        n = int(bits[b].reshape(len(c), -1).astype(np.int64).sum(axis=0) @ fo)
        if n:
            ledger.add(layer, t, b, acs=n)


def _count_lowered(lowered: LoweredGraph, x, ledger: OpLedger, scheme: str | None):
    res = lowered.forward(x, capture=True)
    for cap in res.captures:
        node = lowered.nodes[cap.node]
        layer = node.origin[0]
        fo = _node_fanout(node, cap.in_shape)
        if cap.real:
            if cap.executed:
                ledger.add(layer, cap.t, -1, macs=int(fo.sum()) * len(x))
            continue
        schedule, planes = cap.schedule, cap.planes
        if scheme == "unary" and schedule == "bitplane":
            schedule, planes = "unary", node.in_dn
        elif scheme == "bitplane" and schedule == "unary":
            schedule, planes = "bitplane", max(1, node.in_dn.bit_length())
        _count_spiking(ledger, layer, cap.t, cap.codes, fo, schedule, planes)


def _node_fanout(node, in_shape):
    if node.kind in ("ac_conv", "mac_conv"):
        return fanout_map("conv", in_shape, out_channels=node.weight.shape[0], kernel_size=node.weight.shape[2],
                          stride=node.stride, padding=node.padding)
    return fanout_map("linear", in_shape, out_features=node.weight.shape[0])


def _layer_fanout(layer, in_shape):
    if isinstance(layer, Conv):
        return fanout_map("conv", in_shape, out_channels=layer.out_channels, kernel_size=layer.kernel_size,
                          stride=layer.stride, padding=layer.padding)
    return fanout_map("linear", in_shape, out_features=layer.out_features)


def _count_training(graph: LayerGraph, x, ledger: OpLedger, scheme: str | None):
    res = graph.run(x, record=True, trace=True)
    first_real = None
    for i, layer in enumerate(graph.layers):
        if layer.kind not in SYNAPTIC:
            continue
        # walk back over Flatten to find what feeds this layer
        src = i - 1
        while src >= 0 and isinstance(graph.layers[src], Flatten):
            src -= 1
        src_layer = graph.layers[src] if src >= 0 else None
        for t in range(graph.timesteps):
            inp = res.trace[i - 1][t] if i > 0 else np.asarray(x)
            fo = _layer_fanout(layer, inp.shape[1:])
            if isinstance(src_layer, Neuron):
                cfg = src_layer.cfg
                codes = np.rint(res.activations[src][t].astype(np.float64) * cfg.N).astype(np.int64)
                codes = codes.reshape(inp.shape)
                sched = {IBRA: "bitplane", ILIF: "unary", LIF: "bitplane"}[cfg.kind]
                planes = _planes_for(cfg)
                if scheme == "unary" and sched == "bitplane" and cfg.kind != LIF:
                    sched, planes = "unary", cfg.d_n
                elif scheme == "bitplane" and sched == "unary":
                    sched, planes = "bitplane", cfg.nbits
                _count_spiking(ledger, i, t, codes, fo, sched, planes)
            else:
                if first_real is None:
                    first_real = i
                if graph.encoding == "spike" and i == first_real and t > 0:
                    continue
                ledger.add(i, t, -1, macs=int(fo.sum()) * len(inp))


def count_ops(graph, corpus, scheme: str | None = None, batch_size: int = 128) -> OpLedger:
    """Count MACs and ACs for a forward pass over ``corpus``.

    ``graph`` is a lowered graph or a training-mode graph.  ``scheme``
    forces ``"bitplane"`` or ``"unary"`` expansion of integer activations;
    by default IBRA-LIF uses bit-planes and I-LIF unary planes.  Counting
    observes the forward pass and never alters its results.
    """
    ledger = OpLedger()
    corpus = np.asarray(corpus)
    for s in range(0, len(corpus), batch_size):
        xb = corpus[s:s + batch_size]
        if isinstance(graph, LoweredGraph):
            _count_lowered(graph, xb, ledger, scheme)
        else:
            _count_training(graph, xb, ledger, scheme)
    return ledger


# pricing ------------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyModel:
    """Per-operation energies in picojoules."""

    e_mac: float = 4.6
    e_ac: float = 0.9

    def __post_init__(self):
        if self.e_mac <= 0 or self.e_ac <= 0:
            raise ValueError("energy constants must be positive")


PJ_PER_MJ = 1e9


@dataclass
class EnergyReport:
    per_layer_mj: dict[int, float]
    total_mj: float
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "timestep", "planes", "macs", "acs", "energy_pj"])
        for r in self.rows:
            w.writerow([r["layer"], r["timestep"], r["planes"], r["macs"], r["acs"], f"{r['energy_pj']:.6f}"])
        return buf.getvalue()


def price(ledger: OpLedger, model: EnergyModel = EnergyModel()) -> EnergyReport:
    grouped: dict[tuple[int, int], list] = defaultdict(lambda: [0, 0, 0])
    for (layer, t, plane), (m, a) in ledger.counts.items():
        g = grouped[(layer, t)]
        g[0] += m
        g[1] += a
        if plane >= 0 and a:
            g[2] += 1
    rows, per_layer = [], defaultdict(float)
    for (layer, t), (m, a, planes) in sorted(grouped.items()):
        pj = model.e_mac * m + model.e_ac * a
        rows.append({"layer": layer, "timestep": t, "planes": planes, "macs": m, "acs": a, "energy_pj": pj})
        per_layer[layer] += pj / PJ_PER_MJ
    total = model.e_mac * ledger.macs + model.e_ac * ledger.acs
    return EnergyReport(dict(per_layer), total / PJ_PER_MJ, rows)


def efficiency_ratio(reference_mj: float, candidate_mj: float) -> float:
    """How many times less energy ``candidate`` uses than ``reference``."""
    if candidate_mj <= 0:
        raise ValueError("candidate energy must be positive")
    return reference_mj / candidate_mj


# mode comparison ---------------------------------------------------------------------------

def compare_modes(trained: LayerGraph, lowered: LoweredGraph, corpus, model: EnergyModel = EnergyModel(),
                  lif_graph: LayerGraph | None = None, lif_timesteps: int = 4) -> list[dict]:
    """One row per execution regime: ANN, LIF, I-LIF (unary) and IBRA-LIF (bit-plane).

    The ANN row replaces neurons by ReLU; the LIF row (unless ``lif_graph``
    is given) runs the same weights with LIF neurons for ``lif_timesteps``.
    Energies are totals over the corpus; ``ratio_vs_ann`` is the ANN energy
    divided by the row energy.
    """
    if [l.kind for l in trained.layers] != lowered.architecture:
        raise ValueError("architecture mismatch between trained and lowered graphs")
    ann = trained.with_neurons(lambda l: Activation("relu"))
    lif = lif_graph or trained.with_neurons(lambda l: Neuron(NeuronConfig.lif(T=lif_timesteps)))
    ledgers = {
        "ANN": count_ops(ann, corpus),
        "LIF": count_ops(lif, corpus),
        "I-LIF-unary": count_ops(lowered, corpus, scheme="unary"),
        "IBRA-bitplane": count_ops(lowered, corpus, scheme="bitplane"),
    }
    ann_mj = price(ledgers["ANN"], model).total_mj
    rows = []
    n = max(len(corpus), 1)
    for name, led in ledgers.items():
        e = price(led, model).total_mj
        rows.append({
            "mode": name, "macs": led.macs, "acs": led.acs, "energy_mj": e,
            "energy_mj_per_sample": e / n,
            "ratio_vs_ann": (ann_mj / e) if e > 0 else float("inf"),
        })
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [EXCLUSIONS, f"{'mode':<15}{'MACs':>14}{'ACs':>14}{'energy (mJ)':>16}{'x vs ANN':>10}"]
    for r in rows:
        lines.append(f"{r['mode']:<15}{r['macs']:>14d}{r['acs']:>14d}{r['energy_mj']:>16.6g}{r['ratio_vs_ann']:>10.2f}")
    return "\n".join(lines) + "\n"
