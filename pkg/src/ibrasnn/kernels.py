"""Kernel dispatch between the compiled extension and the numpy fallback.

``IBRASNN_KERNELS`` (read at import) picks the implementation:

* ``auto`` (default): the compiled event-driven spike convolution and
  bit-plane codec; numpy for the dense convolutions and the spike linear
  layer, where im2col/matmul on BLAS beats the compiled loops at the spike
  densities seen in practice (see ``benchmarks/bench_kernels.py``).
* ``cython``: every kernel from the extension.
* ``python``: every kernel from numpy.

Without the extension everything falls back to numpy.  ``BACKEND`` is
``"cython"`` when the extension is in use for at least one kernel and
``SELECTED`` maps each kernel to its implementation.
"""
import os

import numpy as np

from . import _kernels_py

KERNELS = ("conv2d_forward", "conv2d_grad_input", "conv2d_grad_weight", "spike_conv2d", "spike_linear",
           "bitplanes")
_COMPILED_BY_DEFAULT = ("spike_conv2d", "bitplanes")


def available_backends():
    names = {"python": _kernels_py}
    try:
        from . import _ckernels

        names["cython"] = _ckernels
    except ImportError:
        pass
    return names


def _select(mode: str) -> dict:
    backends = available_backends()
    if mode not in ("auto", "cython", "python"):
        raise ValueError(f"IBRASNN_KERNELS must be auto, cython or python, got {mode!r}")
    if "cython" not in backends or mode == "python":
        return {k: "python" for k in KERNELS}
    if mode == "cython":
        return {k: "cython" for k in KERNELS}
    return {k: "cython" if k in _COMPILED_BY_DEFAULT else "python" for k in KERNELS}


SELECTED = _select(os.environ.get("IBRASNN_KERNELS", "auto").lower())
BACKEND = "cython" if "cython" in SELECTED.values() else "python"
_mods = available_backends()
_impl = {k: _mods[b] for k, b in SELECTED.items()}


def _c(a):
    return np.ascontiguousarray(a)


def conv2d_forward(x, w, stride=1, pad=0):
    return _impl["conv2d_forward"].conv2d_forward(_c(x), _c(w), int(stride), int(pad))


def conv2d_grad_input(gy, w, x_shape, stride=1, pad=0):
    return _impl["conv2d_grad_input"].conv2d_grad_input(_c(gy), _c(w), tuple(int(s) for s in x_shape),
                                                        int(stride), int(pad))


def conv2d_grad_weight(gy, x, w_shape, stride=1, pad=0):
    return _impl["conv2d_grad_weight"].conv2d_grad_weight(_c(gy), _c(x), tuple(int(s) for s in w_shape),
                                                          int(stride), int(pad))


def spike_conv2d(bits, w, stride=1, pad=0):
    return _impl["spike_conv2d"].spike_conv2d(_c(bits.astype(np.uint8, copy=False)), _c(w), int(stride), int(pad))


def spike_linear(bits, w):
    return _impl["spike_linear"].spike_linear(_c(bits.astype(np.uint8, copy=False)), _c(w))


def bitplanes(codes, nbits):
    return _impl["bitplanes"].bitplanes(codes, int(nbits))
