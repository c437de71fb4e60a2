# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels.

Same contracts as numpy_ops: inputs are already zero-padded, accumulation
is single-threaded and deterministic.  Supports float32 and float64 via a
fused type; both operands must share one dtype.  The stride-1 case (every
convolution in the network) runs a specialized inner loop with unit-stride
array access so the C compiler can vectorize it.
"""

import numpy as np

ctypedef fused real:
    float
    double


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                   int stride, int dilation):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h - dilation * (kh - 1) - 1) // stride + 1
    cdef Py_ssize_t wo = (wd - dilation * (kw - 1) - 1) // stride + 1
    y_arr = np.zeros((n, co, ho, wo),
                     dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t b, o, c, i, j, oy, ox, iy, jx
    cdef real wv
    with nogil:
        for b in range(n):
            for o in range(co):
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            wv = w[o, c, i, j]
                            if wv == 0:
                                continue
                            jx = j * dilation
                            if stride == 1:
                                for oy in range(ho):
                                    iy = oy + i * dilation
                                    for ox in range(wo):
                                        y[b, o, oy, ox] += wv * x[b, c, iy, ox + jx]
                            else:
                                for oy in range(ho):
                                    iy = oy * stride + i * dilation
                                    for ox in range(wo):
                                        y[b, o, oy, ox] += wv * x[b, c, iy, ox * stride + jx]
    return y_arr


def conv2d_backward_input(real[:, :, :, ::1] gy, real[:, :, :, ::1] w,
                          x_shape, int stride, int dilation):
    cdef Py_ssize_t n = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t ci = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    gx_arr = np.zeros(x_shape,
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, o, c, i, j, oy, ox, iy, jx
    cdef real wv
    with nogil:
        for b in range(n):
            for o in range(co):
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            wv = w[o, c, i, j]
                            if wv == 0:
                                continue
                            jx = j * dilation
                            if stride == 1:
                                for oy in range(ho):
                                    iy = oy + i * dilation
                                    for ox in range(wo):
                                        gx[b, c, iy, ox + jx] += wv * gy[b, o, oy, ox]
                            else:
                                for oy in range(ho):
                                    iy = oy * stride + i * dilation
                                    for ox in range(wo):
                                        gx[b, c, iy, ox * stride + jx] += wv * gy[b, o, oy, ox]
    return gx_arr


def conv2d_backward_weight(real[:, :, :, ::1] gy, real[:, :, :, ::1] x,
                           w_shape, int stride, int dilation):
    cdef Py_ssize_t n = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t ci = x.shape[1]
    cdef Py_ssize_t kh = w_shape[2], kw = w_shape[3]
    gw_arr = np.zeros(w_shape,
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, o, c, i, j, oy, ox, iy, jx
    cdef real acc
    with nogil:
        for b in range(n):
            for o in range(co):
                for c in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            jx = j * dilation
                            acc = 0
                            if stride == 1:
                                for oy in range(ho):
                                    iy = oy + i * dilation
                                    for ox in range(wo):
                                        acc += gy[b, o, oy, ox] * x[b, c, iy, ox + jx]
                            else:
                                for oy in range(ho):
                                    iy = oy * stride + i * dilation
                                    for ox in range(wo):
                                        acc += gy[b, o, oy, ox] * x[b, c, iy, ox * stride + jx]
                            gw[o, c, i, j] += acc
    return gw_arr
