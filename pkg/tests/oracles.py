"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: explicit loops, float64, no shared
code with the package beyond reading graph attributes.
"""
from collections import defaultdict

import numpy as np

from ibrasnn.lowering import AC_KINDS, MAC_KINDS, reconstruct


def conv2d_loops(x, w, stride=1, pad=0):
    """Six-loop direct cross-correlation on one sample ``x`` [C, H, W]."""
    C, H, W = x.shape
    O, _, KH, KW = w.shape
    OH = (H + 2 * pad - KH) // stride + 1
    OW = (W + 2 * pad - KW) // stride + 1
    out = np.zeros((O, OH, OW))
    for o in range(O):
        for oy in range(OH):
            for ox in range(OW):
                acc = 0.0
                for c in range(C):
                    for i in range(KH):
                        for j in range(KW):
                            iy, ix = oy * stride + i - pad, ox * stride + j - pad
                            if 0 <= iy < H and 0 <= ix < W:
                                acc += float(x[c, iy, ix]) * float(w[o, c, i, j])
                out[o, oy, ox] = acc
    return out


def linear_loops(x, w, b):
    out = np.zeros(w.shape[0])
    for m in range(w.shape[0]):
        acc = float(b[m])
        for n in range(w.shape[1]):
            acc += float(w[m, n]) * float(x[n])
        out[m] = acc
    return out


def central_diff(f, x, h=1e-3):
    """Numerical gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def lif_scalar(inputs, alpha=0.5, v_th=1.0):
    """Scalar LIF with soft reset; returns the spike list."""
    v, spikes = 0.0, []
    for i in inputs:
        v_pre = alpha * v + i
        s = 1 if v_pre >= v_th else 0
        v = v_pre - s
        spikes.append(s)
    return spikes


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def ibra_scalar(inputs, D, N, alpha=1.0):
    """Scalar IBRA-LIF (I-LIF when ``N = 1``); returns emitted values."""
    d_n = int(round(D * N))
    v, outs = 0.0, []
    for i in inputs:
        v_pre = alpha * v + i
        o = min(max(_round_half_away(v_pre * N), 0), d_n) / N
        v = v_pre - o
        outs.append(o)
    return outs


def _conv_synapses(node, in_shape):
    """For every input position (iy, ix): the list of (o, oy, ox) it reaches, by enumeration."""
    _, H, W = in_shape
    O, _, KH, KW = node.weight.shape
    s, p = node.stride, node.padding
    OH = (H + 2 * p - KH) // s + 1
    OW = (W + 2 * p - KW) // s + 1
    reach = defaultdict(int)
    for o in range(O):
        for oy in range(OH):
            for ox in range(OW):
                for i in range(KH):
                    for j in range(KW):
                        iy, ix = oy * s + i - p, ox * s + j - p
                        if 0 <= iy < H and 0 <= ix < W:
                            reach[(iy, ix)] += 1
    return reach


def enumerate_events(lowered, x, scheme):
    """Brute-force op ledger ``{(layer, t, plane): (macs, acs)}``.

    Walks every spike of every plane and counts the synapses it reaches.
    ``scheme`` is ``"bitplane"`` (popcount of the integer code) or
    ``"unary"`` (``v`` spikes for integer ``v``).
    """
    res = lowered.forward(x, trains=True, trace=True)
    counts = defaultdict(lambda: [0, 0])
    nodes = lowered.nodes
    first_real = next(j for j, n in enumerate(nodes) if n.kind in MAC_KINDS)
    for j, node in enumerate(nodes):
        if node.kind not in AC_KINDS + MAC_KINDS:
            continue
        layer = node.origin[0]
        src = j - 1
        while nodes[src].kind == "flatten":
            src -= 1
        for t in range(lowered.timesteps):
            if node.kind in MAC_KINDS:
                if lowered.encoding == "spike" and j == first_real and t > 0:
                    continue
                inp = x if src < 0 else res.trace[src][t]
                if node.kind == "mac_conv":
                    reach = _conv_synapses(node, inp.shape[1:])
                    macs = sum(reach.values()) * inp.shape[1] * len(inp)
                else:
                    macs = int(np.prod(inp.shape[1:])) * node.weight.shape[0] * len(inp)
                counts[(layer, t, -1)][0] += macs
                continue
            planes = res.trains[src].bits[t]  # [P, B, ...]
            codes = reconstruct(planes) if nodes[src].cfg.kind != "I-LIF" else planes.sum(axis=0)
            if node.kind == "ac_conv":
                reach = _conv_synapses(node, codes.shape[1:])
            for b_idx in range(codes.shape[0]):
                for pos in zip(*np.nonzero(codes[b_idx])):
                    v = int(codes[b_idx][pos])
                    syn = reach[(pos[1], pos[2])] if node.kind == "ac_conv" else node.weight.shape[0]
                    if scheme == "unary":
                        for d in range(v):
                            counts[(layer, t, d)][1] += syn
                    else:
                        for bit in range(v.bit_length()):
                            if (v >> bit) & 1:
                                counts[(layer, t, bit)][1] += syn
    return {k: tuple(v) for k, v in sorted(counts.items())}
