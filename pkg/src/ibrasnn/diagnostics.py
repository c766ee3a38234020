"""Activation-range coverage and gradient-magnitude diagnostics.

Range coverage measures how much of a neuron's integer output range is
actually used: for every neuron layer we histogram the emitted codes
``O * N`` over a corpus and report ``distinct / (D_N + 1)``.

The gradient report tracks ``max |dL/dW|`` per parameter per epoch.  Since
``dL/dW_{l+1} = sum_t dL/dY_{l+1} O_l^t``, weight gradients grow linearly
with the activations feeding the layer; :func:`gradient_scaling_probe`
measures that directly.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .network import LayerGraph, cnn, fit, make_activation, mlp
from .tensor import Tape


@dataclass
class LayerCoverage:
    layer: int
    d_n: int
    histogram: np.ndarray  # counts for codes 0..D_N
    achieved_max: int
    coverage: float


@dataclass
class RangeCoverageReport:
    layers: list[LayerCoverage] = field(default_factory=list)
    label: str = ""

    def mean_coverage(self) -> float:
        return float(np.mean([l.coverage for l in self.layers])) if self.layers else 0.0

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "layer", "d_n", "achieved_max", "distinct", "coverage"])
        for l in self.layers:
            w.writerow([self.label, l.layer, l.d_n, l.achieved_max, int(np.count_nonzero(l.histogram)),
                        f"{l.coverage:.6f}"])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "layer", "code", "count"])
        for l in self.layers:
            for code, count in enumerate(l.histogram):
                w.writerow([self.label, l.layer, code, int(count)])
        return buf.getvalue()

    def text(self) -> str:
        lines = [f"range coverage ({self.label})" if self.label else "range coverage"]
        for l in self.layers:
            lines.append(f"  layer {l.layer}: achieved max {l.achieved_max} of D_N={l.d_n}, "
                         f"{int(np.count_nonzero(l.histogram))} distinct codes, coverage {l.coverage:.3f}")
        return "\n".join(lines) + "\n"


def range_coverage(graph: LayerGraph, x, label: str = "", batch_size: int = 256) -> RangeCoverageReport:
    """Histogram the integer codes every neuron layer emits over ``x``."""
    hist: dict[int, np.ndarray] = {}
    for i in graph.neuron_layers():
        cfg = graph.layers[i].cfg
        hist[i] = np.zeros(cfg.d_n + 1, dtype=np.int64)
    x = np.asarray(x)
    for s in range(0, len(x), batch_size):
        res = graph.run(x[s:s + batch_size], record=True)
        for i, acts in res.activations.items():
            cfg = graph.layers[i].cfg
            for a in acts:
                codes = np.rint(a.astype(np.float64) * cfg.N).astype(np.int64).reshape(-1)
                hist[i] += np.bincount(codes, minlength=cfg.d_n + 1)[:cfg.d_n + 1]
    report = RangeCoverageReport(label=label)
    for i, h in hist.items():
        nz = np.flatnonzero(h)
        report.layers.append(LayerCoverage(i, len(h) - 1, h, int(nz.max()) if nz.size else 0,
                                           float(nz.size / len(h))))
    return report


def standardize(x: np.ndarray, stats=None):
    """Per-feature z-score; returns ``(x_std, (mean, std))``.  The input normalization used by the range report."""
    x = np.asarray(x, dtype=np.float32)
    if stats is None:
        mean = x.mean(axis=0, keepdims=True)
        std = x.std(axis=0, keepdims=True)
        stats = (mean, np.where(std > 0, std, 1.0).astype(np.float32))
    return ((x - stats[0]) / stats[1]).astype(np.float32), stats


def paired_range_runs(x, y, *, D=15.0, N=100, epochs=10, lr=1e-2, seed=0, arch="auto"):
    """Train the same architecture twice on standardized data, seed and schedule shared.

    The first run has no range alignment (``N = 1``, ``D``); the second
    keeps the same integer ceiling ``D_N = round(D)`` but with scaling
    ``N`` and ``D / N``.  Returns ``(report_without_ra, report_with_ra,
    histories)``.
    """
    xs, _ = standardize(x)
    d_n = int(round(D))
    runs = {"without-RA": (float(d_n), 1), "with-RA": (d_n / N, int(N))}
    reports, histories = [], {}
    for label, (d, n) in runs.items():
        make = lambda: make_activation("ibra", D=d, N=n)  # noqa: E731
        if arch == "cnn" or (arch == "auto" and xs.ndim == 4):
            g = cnn(input_shape=xs.shape[1:], classes=int(y.max()) + 1, act=make, seed=seed)
        else:
            g = mlp(xs.shape[1], int(y.max()) + 1, act=make, seed=seed)
        histories[label] = fit(g, xs, y, epochs=epochs, lr=lr, seed=seed)
        reports.append(range_coverage(g, xs, label=label))
    return reports[0], reports[1], histories


# gradients ----------------------------------------------------------------------

def grad_report_csv(history: list[dict]) -> str:
    """CSV of ``max |dL/dW|`` per parameter per epoch with a non-finite flag."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "parameter", "grad_max", "finite"])
    for ep, m in enumerate(history):
        for name, g in m["grad_max"].items():
            w.writerow([ep, name, f"{g:.9g}", int(np.isfinite(g))])
    return buf.getvalue()


def nonfinite_events(history: list[dict]) -> list[tuple[int, str]]:
    return [(ep, name) for ep, m in enumerate(history) for name, g in m["grad_max"].items() if not np.isfinite(g)]


def weight_grad_for_activation(activation: np.ndarray, weight: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """``dL/dW`` of ``Y = W a`` with ``L = sum(upstream * Y)``, computed through the tape."""
    w = T.parameter(weight, dtype="real64")
    a = T.Tensor(activation, dtype="real64")
    with Tape() as tape:
        yv = T.linear(a, w, None)
        loss = T.sum(T.mul(yv, T.Tensor(upstream, dtype="real64")))
    return tape.backward(loss)[w.id].data


def gradient_scaling_probe(d_n: int = 15, width: int = 16, out: int = 4, seed: int = 0) -> dict:
    """Weight-gradient magnitude with activations forced to ``D_N`` versus a unit-activation control.

    Uses ``N = 1`` so the emitted value equals the integer code.  Returns
    the two max gradients and their ratio (expected ``D_N``).
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((out, width))
    up = rng.standard_normal(out)
    g_forced = weight_grad_for_activation(np.full(width, float(d_n)), w, up)
    g_unit = weight_grad_for_activation(np.ones(width), w, up)
    g_zero = weight_grad_for_activation(np.zeros(width), w, up)
    gf, gu = float(np.abs(g_forced).max()), float(np.abs(g_unit).max())
    return {"d_n": d_n, "grad_forced": gf, "grad_unit": gu, "ratio": gf / gu,
            "grad_zero": float(np.abs(g_zero).max())}


__all__ = [
    "LayerCoverage", "RangeCoverageReport", "grad_report_csv", "gradient_scaling_probe", "nonfinite_events",
    "paired_range_runs", "range_coverage", "standardize", "weight_grad_for_activation"
]
