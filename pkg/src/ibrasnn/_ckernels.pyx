# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Same signatures and semantics as ``_kernels_py``.  Loops run in a fixed
order so results are reproducible bit-for-bit between runs.

Dense convolutions iterate (c, i, j) outside and the output row inside so
the innermost loop walks contiguous memory.  The spike kernels are event
driven: each set bit scatters its weight column into the outputs, so zero
bits cost nothing and no multiplication touches the activations.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t s) noexcept nogil:
    # first output index o with o * s + off >= 0
    if off >= 0:
        return 0
    return (-off + s - 1) // s


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t n, Py_ssize_t s, Py_ssize_t on) noexcept nogil:
    # one past the last output index o with o * s + off < n
    cdef Py_ssize_t last = n - 1 - off
    if last < 0:
        return 0
    last = last // s + 1
    return last if last < on else on


def conv2d_forward(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - KH) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - KW) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, O, OH, OW), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, oy, ox, c, i, j, y0, y1, x0, x1, s = stride
    cdef floating wv
    with nogil:
        for b in range(B):
            for o in range(O):
                for c in range(C):
                    for i in range(KH):
                        y0 = _lo(i - pad, s)
                        y1 = _hi(i - pad, H, s, OH)
                        for j in range(KW):
                            x0 = _lo(j - pad, s)
                            x1 = _hi(j - pad, W, s, OW)
                            wv = w[o, c, i, j]
                            for oy in range(y0, y1):
                                for ox in range(x0, x1):
                                    out[b, o, oy, ox] += wv * x[b, c, oy * s + i - pad, ox * s + j - pad]
    return out_arr


def conv2d_grad_input(const floating[:, :, :, ::1] gy, const floating[:, :, :, ::1] w, tuple x_shape,
                      int stride, int pad):
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = gy.shape[2], OW = gy.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, o, oy, ox, c, i, j, y0, y1, x0, x1, s = stride
    cdef floating wv
    with nogil:
        for b in range(B):
            for c in range(C):
                for o in range(O):
                    for i in range(KH):
                        y0 = _lo(i - pad, s)
                        y1 = _hi(i - pad, H, s, OH)
                        for j in range(KW):
                            x0 = _lo(j - pad, s)
                            x1 = _hi(j - pad, W, s, OW)
                            wv = w[o, c, i, j]
                            for oy in range(y0, y1):
                                for ox in range(x0, x1):
                                    gx[b, c, oy * s + i - pad, ox * s + j - pad] += wv * gy[b, o, oy, ox]
    return gx_arr


def conv2d_grad_weight(const floating[:, :, :, ::1] gy, const floating[:, :, :, ::1] x, tuple w_shape,
                       int stride, int pad):
    cdef Py_ssize_t O = w_shape[0], C = w_shape[1], KH = w_shape[2], KW = w_shape[3]
    cdef Py_ssize_t B = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = gy.shape[2], OW = gy.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gw_arr = np.zeros((O, C, KH, KW), dtype=dtype)
    cdef floating[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, o, oy, ox, c, i, j, y0, y1, x0, x1, s = stride
    cdef floating acc
    with nogil:
        for o in range(O):
            for c in range(C):
                for i in range(KH):
                    y0 = _lo(i - pad, s)
                    y1 = _hi(i - pad, H, s, OH)
                    for j in range(KW):
                        x0 = _lo(j - pad, s)
                        x1 = _hi(j - pad, W, s, OW)
                        acc = 0
                        for b in range(B):
                            for oy in range(y0, y1):
                                for ox in range(x0, x1):
                                    acc = acc + gy[b, o, oy, ox] * x[b, c, oy * s + i - pad, ox * s + j - pad]
                        gw[o, c, i, j] = acc
    return gw_arr


def spike_conv2d(const unsigned char[:, :, :, ::1] bits, const floating[:, :, :, ::1] w,
                 int stride, int pad):
    cdef Py_ssize_t B = bits.shape[0], C = bits.shape[1], H = bits.shape[2], W = bits.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - KH) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - KW) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    # weights as [C, KH, KW, O] and outputs as [B, OH, OW, O]: each event adds a contiguous O-vector
    wt_arr = np.ascontiguousarray(np.transpose(np.asarray(w), (1, 2, 3, 0)))
    cdef const floating[:, :, :, ::1] wt = wt_arr
    acc_arr = np.zeros((B, OH, OW, O), dtype=dtype)
    cdef floating[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t b, o, c, i, j, iy, ix, ty, tx, oy, ox, s = stride
    with nogil:
        for b in range(B):
            for c in range(C):
                for iy in range(H):
                    for ix in range(W):
                        if not bits[b, c, iy, ix]:
                            continue
                        for i in range(KH):
                            ty = iy + pad - i
                            if ty < 0 or ty % s:
                                continue
                            oy = ty // s
                            if oy >= OH:
                                continue
                            for j in range(KW):
                                tx = ix + pad - j
                                if tx < 0 or tx % s:
                                    continue
                                ox = tx // s
                                if ox >= OW:
                                    continue
                                for o in range(O):
                                    acc[b, oy, ox, o] += wt[c, i, j, o]
    return np.ascontiguousarray(np.transpose(acc_arr, (0, 3, 1, 2)))


def spike_linear(const unsigned char[:, ::1] bits, const floating[:, ::1] w):
    cdef Py_ssize_t B = bits.shape[0], N = bits.shape[1], M = w.shape[0]
    dtype = np.float32 if floating is float else np.float64
    wt_arr = np.ascontiguousarray(np.asarray(w).T)
    cdef const floating[:, ::1] wt = wt_arr
    out_arr = np.zeros((B, M), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t b, m, n
    with nogil:
        for b in range(B):
            for n in range(N):
                if bits[b, n]:
                    for m in range(M):
                        out[b, m] += wt[n, m]
    return out_arr


def bitplanes(codes, int nbits):
    flat = np.ascontiguousarray(codes, dtype=np.int32).reshape(-1)
    cdef const int[::1] src = flat
    cdef Py_ssize_t n = src.shape[0], k, b
    out_arr = np.zeros((nbits, n), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    cdef int v
    with nogil:
        for k in range(n):
            v = src[k]
            for b in range(nbits):
                out[b, k] = (v >> b) & 1
    return out_arr.reshape((nbits,) + np.shape(codes))
