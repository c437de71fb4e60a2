"""Vectorized numpy implementations of the convolution kernels.

Fallback backend used when the compiled extension is unavailable.  All three
functions operate on already zero-padded inputs; padding policy lives in the
autodiff layer.  Accumulation order is fixed, so results are deterministic
for a given build of numpy.
"""

import numpy as np


def _out_extent(padded, k, stride, dilation):
    return (padded - dilation * (k - 1) - 1) // stride + 1


def _window_view(x, kh, kw, ho, wo, stride, dilation):
    # (N, C, kh, kw, Ho, Wo) sliding view of the padded input, no copy
    n, c = x.shape[:2]
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        (n, c, kh, kw, ho, wo),
        (sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d_forward(x, w, stride, dilation):
    """Cross-correlate padded x (N,Cin,H,W) with w (Cout,Cin,kh,kw)."""
    _, _, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = _out_extent(h, kh, stride, dilation)
    wo = _out_extent(wd, kw, stride, dilation)
    win = _window_view(x, kh, kw, ho, wo, stride, dilation)
    y = np.tensordot(w, win, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def conv2d_backward_input(gy, w, x_shape, stride, dilation):
    """Adjoint of conv2d_forward w.r.t. the padded input."""
    _, _, ho, wo = gy.shape
    co, ci, kh, kw = w.shape
    gx = np.zeros(x_shape, dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            t = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))
            gx[
                :,
                :,
                i * dilation : i * dilation + (ho - 1) * stride + 1 : stride,
                j * dilation : j * dilation + (wo - 1) * stride + 1 : stride,
            ] += t.transpose(0, 3, 1, 2)
    return gx


def conv2d_backward_weight(gy, x, w_shape, stride, dilation):
    """Adjoint of conv2d_forward w.r.t. the weight."""
    _, _, ho, wo = gy.shape
    co, ci, kh, kw = w_shape
    win = _window_view(x, kh, kw, ho, wo, stride, dilation)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 4, 5]))
