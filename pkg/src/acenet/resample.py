"""Plain-numpy resampling helpers.

Shared by the differentiable resize op (which only needs the interpolation
matrices and their transposes) and by the augmentation / data pipeline
(which resamples numpy images and label maps directly).

Convention throughout: align-corners = false, i.e. sample centers sit at
(i + 0.5) * in/out - 0.5, clamped to the valid range.  Resizing to the
identical size is an exact identity.
"""

import numpy as np


def interp_matrix(in_len, out_len):
    """(out_len, in_len) float64 row-interpolation matrix, two taps per row."""
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_len - 1)
    i1 = np.minimum(i0 + 1, in_len - 1)
    frac = src - i0
    m = np.zeros((out_len, in_len), dtype=np.float64)
    rows = np.arange(out_len)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def nearest_indices(in_len, out_len):
    """Source index per output position, rounding half up."""
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * (in_len / out_len) - 0.5
    return np.clip(np.floor(src + 0.5), 0, in_len - 1).astype(np.int64)


def bilinear_resize_nchw(x, out_h, out_w):
    """Resize a (N, C, H, W) array; exact identity when the size is unchanged."""
    h, w = x.shape[2], x.shape[3]
    if (out_h, out_w) == (h, w):
        return x.copy()
    ry = interp_matrix(h, out_h).astype(x.dtype)
    rx = interp_matrix(w, out_w).astype(x.dtype)
    t = np.tensordot(x, ry, axes=([2], [1]))
    y = np.tensordot(t, rx, axes=([2], [1]))
    return np.ascontiguousarray(y)


def resize_hw(arr, out_h, out_w, order):
    """Resize a (H, W) array; order 0 = nearest (labels), 1 = bilinear."""
    h, w = arr.shape
    if (out_h, out_w) == (h, w):
        return arr.copy()
    if order == 0:
        return arr[np.ix_(nearest_indices(h, out_h), nearest_indices(w, out_w))]
    ry = interp_matrix(h, out_h)
    rx = interp_matrix(w, out_w)
    out = ry @ arr.astype(np.float64) @ rx.T
    return out.astype(arr.dtype) if np.issubdtype(arr.dtype, np.floating) else out


def rotate_hw(arr, degrees, order):
    """Rotate a (H, W) array about its center, edge-clamped sampling.

    order 0 resamples nearest (label maps keep their discrete alphabet),
    order 1 bilinear.  degrees is counterclockwise.
    """
    h, w = arr.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    # inverse rotation of the output grid into source coordinates
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_y = np.clip(cos_t * yy + sin_t * xx + cy, 0.0, h - 1.0)
    src_x = np.clip(-sin_t * yy + cos_t * xx + cx, 0.0, w - 1.0)
    if order == 0:
        iy = np.clip(np.floor(src_y + 0.5), 0, h - 1).astype(np.int64)
        ix = np.clip(np.floor(src_x + 0.5), 0, w - 1).astype(np.int64)
        return arr[iy, ix]
    y0 = np.minimum(np.floor(src_y).astype(np.int64), h - 1)
    x0 = np.minimum(np.floor(src_x).astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = src_y - y0, src_x - x0
    a = arr.astype(np.float64)
    out = ((1 - fy) * (1 - fx) * a[y0, x0] + (1 - fy) * fx * a[y0, x1]
           + fy * (1 - fx) * a[y1, x0] + fy * fx * a[y1, x1])
    return out.astype(arr.dtype) if np.issubdtype(arr.dtype, np.floating) else out
