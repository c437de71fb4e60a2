"""Differentiable primitives for the segmentation graph.

Every op validates shapes up front (raising ShapeError naming the offending
operand), computes its value eagerly through the selected kernel backend,
and registers a backward closure on the active tape.  Adjoints accumulate
only into inputs with requires_grad set.
"""

import numpy as np

from acenet import _kernels, resample
from acenet.autodiff.tensor import Tensor, record_op
from acenet.errors import DataError, ShapeError


def _require_4d(t, name, op):
    if t.ndim != 4:
        raise ShapeError(f"{op}: operand '{name}' must be 4-D (N,C,H,W), got shape {t.shape}")


def conv2d(input, weight, bias, stride=1, dilation=1, padding="same"):
    """2-D cross-correlation with square kernels and optional dilation.

    padding "same" zero-pads so a stride-1 output preserves H and W for any
    odd k and any dilation; "valid" pads nothing.  Output extents follow
    H' = floor((H + pad_total - dilation*(k-1) - 1)/stride) + 1.
    """
    _require_4d(input, "input", "conv2d")
    _require_4d(weight, "weight", "conv2d")
    n, cin, h, w = input.shape
    cout, wcin, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d: operand 'weight' must have a square kernel, got {kh}x{kw}")
    if wcin != cin:
        raise ShapeError(
            f"conv2d: operand 'weight' expects {wcin} input channels, input has {cin}"
        )
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: operand 'bias' must have shape ({cout},), got {bias.shape}")
    if stride < 1 or dilation < 1:
        raise ShapeError(f"conv2d: stride and dilation must be positive, got {stride}, {dilation}")
    if padding == "same":
        if kh % 2 == 0:
            raise ShapeError("conv2d: SAME padding requires an odd kernel (asymmetric padding not supported)")
        pad = dilation * (kh - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ShapeError(f"conv2d: unknown padding mode {padding!r}")

    xp = np.pad(input.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else input.data
    span = dilation * (kh - 1) + 1
    if xp.shape[2] < span or xp.shape[3] < span:
        raise ShapeError(
            f"conv2d: operand 'input' spatial extents {h}x{w} too small for "
            f"kernel {kh} with dilation {dilation} and padding {padding}"
        )
    y = _kernels.conv2d_forward(np.ascontiguousarray(xp), weight.data, stride, dilation)
    y += bias.data[None, :, None, None]
    out = Tensor(y, requires_grad=input.requires_grad or weight.requires_grad or bias.requires_grad,
                 dtype=y.dtype)

    def backward(gy):
        gy = np.ascontiguousarray(gy)
        if bias.requires_grad:
            bias.accumulate_grad(gy.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            weight.accumulate_grad(
                _kernels.conv2d_backward_weight(gy, np.ascontiguousarray(xp), weight.shape, stride, dilation)
            )
        if input.requires_grad:
            gxp = _kernels.conv2d_backward_input(gy, weight.data, xp.shape, stride, dilation)
            input.accumulate_grad(gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp)

    return record_op(out, backward)


def transposed_conv2x2(input, weight, bias):
    """Stride-2 transposed convolution: exact adjoint of a stride-2 VALID 2x2 conv.

    weight has layout (Cin, Cout, 2, 2); spatial extents double.
    """
    _require_4d(input, "input", "transposed_conv2x2")
    n, cin, h, w = input.shape
    if weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(
            f"transposed_conv2x2: operand 'weight' must have shape (Cin,Cout,2,2), got {weight.shape}"
        )
    wcin, cout = weight.shape[0], weight.shape[1]
    if wcin != cin:
        raise ShapeError(
            f"transposed_conv2x2: operand 'weight' expects {wcin} input channels, input has {cin}"
        )
    if bias.shape != (cout,):
        raise ShapeError(
            f"transposed_conv2x2: operand 'bias' must have shape ({cout},), got {bias.shape}"
        )

    y = np.zeros((n, cout, 2 * h, 2 * w), dtype=input.dtype)
    for i in (0, 1):
        for j in (0, 1):
            # scatter input * kernel tap (i,j) onto the even/odd output grid
            t = np.tensordot(input.data, weight.data[:, :, i, j], axes=([1], [0]))
            y[:, :, i::2, j::2] = t.transpose(0, 3, 1, 2)
    y += bias.data[None, :, None, None]
    out = Tensor(y, requires_grad=input.requires_grad or weight.requires_grad or bias.requires_grad,
                 dtype=y.dtype)

    def backward(gy):
        if bias.requires_grad:
            bias.accumulate_grad(gy.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for i in (0, 1):
                for j in (0, 1):
                    gw[:, :, i, j] = np.tensordot(
                        input.data, gy[:, :, i::2, j::2], axes=([0, 2, 3], [0, 2, 3])
                    )
            weight.accumulate_grad(gw)
        if input.requires_grad:
            gx = np.zeros_like(input.data)
            for i in (0, 1):
                for j in (0, 1):
                    t = np.tensordot(gy[:, :, i::2, j::2], weight.data[:, :, i, j], axes=([1], [1]))
                    gx += t.transpose(0, 3, 1, 2)
            input.accumulate_grad(gx)

    return record_op(out, backward)


def maxpool2x2(input):
    """2x2 max pooling; the adjoint goes to the first (row-major) argmax of each window."""
    _require_4d(input, "input", "maxpool2x2")
    n, c, h, w = input.shape
    if h % 2 or w % 2:
        raise ShapeError(
            f"maxpool2x2: operand 'input' needs even spatial extents, got {h}x{w}; "
            "pad the input to a multiple of 2^depth first"
        )
    ho, wo = h // 2, w // 2
    windows = input.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = np.argmax(windows, axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = Tensor(y, requires_grad=input.requires_grad, dtype=y.dtype)

    def backward(gy):
        if not input.requires_grad:
            return
        g = np.zeros((n, c, ho, wo, 4), dtype=gy.dtype)
        np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
        input.accumulate_grad(
            g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        )

    return record_op(out, backward)


def resize_bilinear(input, out_h, out_w):
    """Differentiable bilinear resize (align-corners = false); identity when sizes match."""
    _require_4d(input, "input", "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: target extents must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = input.shape
    if (out_h, out_w) == (h, w):
        out = Tensor(input.data.copy(), requires_grad=input.requires_grad, dtype=input.dtype)

        def backward_same(gy):
            if input.requires_grad:
                input.accumulate_grad(gy)

        return record_op(out, backward_same)

    ry = resample.interp_matrix(h, out_h).astype(input.dtype)
    rx = resample.interp_matrix(w, out_w).astype(input.dtype)
    t = np.tensordot(input.data, ry, axes=([2], [1]))
    y = np.ascontiguousarray(np.tensordot(t, rx, axes=([2], [1])))
    out = Tensor(y, requires_grad=input.requires_grad, dtype=y.dtype)

    def backward(gy):
        if not input.requires_grad:
            return
        # the resize is linear, so the adjoint applies the transposed matrices
        t = np.tensordot(gy, ry, axes=([2], [0]))
        input.accumulate_grad(np.ascontiguousarray(np.tensordot(t, rx, axes=([2], [0]))))

    return record_op(out, backward)


def concat_channels(inputs):
    """Concatenate along the channel axis, preserving argument order."""
    if not inputs:
        raise ShapeError("concat_channels: needs at least one input")
    for t in inputs:
        _require_4d(t, "input", "concat_channels")
    ref = inputs[0]
    for i, t in enumerate(inputs[1:], start=1):
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ShapeError(
                f"concat_channels: input {i} has shape {t.shape}, "
                f"incompatible with input 0 of shape {ref.shape}"
            )
    y = np.concatenate([t.data for t in inputs], axis=1)
    out = Tensor(y, requires_grad=any(t.requires_grad for t in inputs), dtype=y.dtype)
    widths = [t.shape[1] for t in inputs]

    def backward(gy):
        offset = 0
        for t, cw in zip(inputs, widths):
            if t.requires_grad:
                t.accumulate_grad(gy[:, offset:offset + cw])
            offset += cw

    return record_op(out, backward)


def relu(input):
    """Elementwise max(x, 0); subgradient 0 at the kink."""
    y = np.maximum(input.data, 0)
    out = Tensor(y, requires_grad=input.requires_grad, dtype=y.dtype)

    def backward(gy):
        if input.requires_grad:
            input.accumulate_grad(gy * (input.data > 0))

    return record_op(out, backward)


def softmax_cross_entropy(logits, labels, mask=None):
    """Mean pixel-wise cross-entropy of the softmax over the channel axis.

    labels is an integer (N,H,W) map; mask, when given, is a boolean (N,H,W)
    map marking the pixels included in the mean.  Numerically stabilized by
    max-subtraction; the gradient is (softmax - onehot)/count on included
    pixels and 0 elsewhere.
    """
    _require_4d(logits, "logits", "softmax_cross_entropy")
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"softmax_cross_entropy: operand 'labels' must have shape {(n, h, w)}, got {labels.shape}"
        )
    if labels.min() < 0 or labels.max() >= c:
        bad = np.argwhere((labels < 0) | (labels >= c))[0]
        raise DataError(
            f"label {labels[tuple(bad)]} out of range [0, {c}) at pixel "
            f"(n={bad[0]}, y={bad[1]}, x={bad[2]})"
        )
    if mask is None:
        included = np.ones((n, h, w), dtype=bool)
    else:
        included = np.asarray(mask, dtype=bool)
        if included.shape != (n, h, w):
            raise ShapeError(
                f"softmax_cross_entropy: operand 'mask' must have shape {(n, h, w)}, got {included.shape}"
            )
    count = int(included.sum())
    if count == 0:
        raise DataError("softmax_cross_entropy: no pixels included in the loss")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    softmax = ez / sez
    # -log softmax[label] = log(sum exp z) - z[label]
    picked = np.take_along_axis(z, labels[:, None], axis=1)[:, 0]
    nll = np.log(sez[:, 0]) - picked
    loss = (nll * included).sum() / count
    out = Tensor(np.asarray(loss, dtype=logits.dtype), requires_grad=logits.requires_grad,
                 dtype=logits.dtype)

    def backward(gy):
        if not logits.requires_grad:
            return
        onehot = np.zeros_like(softmax)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        g = (softmax - onehot) * (included[:, None] / count)
        logits.accumulate_grad(g * gy)

    return record_op(out, backward)


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add: operand shapes differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad,
                 dtype=a.dtype)

    def backward(gy):
        if a.requires_grad:
            a.accumulate_grad(gy)
        if b.requires_grad:
            b.accumulate_grad(gy)

    return record_op(out, backward)


def scale(a, factor):
    """Multiply a tensor by a python scalar."""
    out = Tensor(a.data * factor, requires_grad=a.requires_grad, dtype=a.dtype)

    def backward(gy):
        if a.requires_grad:
            a.accumulate_grad(gy * factor)

    return record_op(out, backward)
