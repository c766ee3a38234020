"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Inputs are assumed validated by the caller (``ibrasnn.tensor``); these
functions only compute.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x, kh, kw, stride, pad):
    # [B, C, OH, OW, kh, kw] view of the padded input
    xp = _pad(x, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride, pad):
    """Cross-correlation of ``x`` [B,C,H,W] with ``w`` [O,C,kh,kw]."""
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(x, kh, kw, stride, pad)
    out = np.einsum("bcyxij,ocij->boyx", win, w, optimize=True)
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_grad_input(gy, w, x_shape, stride, pad):
    B, C, H, W = x_shape
    kh, kw = w.shape[2], w.shape[3]
    OH, OW = gy.shape[2], gy.shape[3]
    gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            # contribution of kernel tap (i, j) to every input position
            contrib = np.einsum("boyx,oc->bcyx", gy, w[:, :, i, j], optimize=True)
            gxp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += contrib
    if pad:
        gxp = gxp[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(gxp)


def conv2d_grad_weight(gy, x, w_shape, stride, pad):
    kh, kw = w_shape[2], w_shape[3]
    win = _windows(x, kh, kw, stride, pad)
    gw = np.einsum("boyx,bcyxij->ocij", gy, win, optimize=True)
    return np.ascontiguousarray(gw, dtype=gy.dtype)


def spike_conv2d(bits, w, stride, pad):
    """Accumulate-only convolution: sum the weights selected by 1-bits.

    ``bits`` is uint8 [B,C,H,W] holding only 0/1.  Multiplying by a 0/1 mask
    adds exactly ``w`` or ``0`` per tap, so this is numerically an
    accumulation of the selected weights.
    """
    return conv2d_forward(bits.astype(w.dtype), w, stride, pad)


def spike_linear(bits, w):
    """Accumulate-only dense layer: ``out[b, m] = sum of w[m, n] where bits[b, n]``."""
    return np.ascontiguousarray(bits.astype(w.dtype) @ w.T)


def bitplanes(codes, nbits):
    """Split non-negative int32 ``codes`` into ``nbits`` uint8 planes, LSB first."""
    codes = np.asarray(codes, dtype=np.int32)
    shifts = np.arange(nbits, dtype=np.int32).reshape((nbits,) + (1,) * codes.ndim)
    return ((codes[None] >> shifts) & 1).astype(np.uint8)
