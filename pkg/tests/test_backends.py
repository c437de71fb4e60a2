"""Compiled kernels and the numpy fallback must agree on every code path."""

import numpy as np
import pytest

from acenet import _kernels
from acenet._kernels import numpy_ops

compiled = pytest.importorskip("acenet._kernels._core")


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dilation", [1, 2])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_forward_agreement(stride, dilation, dtype):
    rng = np.random.default_rng(31)
    x = np.ascontiguousarray(rng.normal(size=(2, 3, 10, 10)).astype(dtype))
    w = np.ascontiguousarray(rng.normal(size=(4, 3, 3, 3)).astype(dtype))
    a = compiled.conv2d_forward(x, w, stride, dilation)
    b = numpy_ops.conv2d_forward(x, w, stride, dilation)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dilation", [1, 2])
def test_backward_agreement(stride, dilation):
    rng = np.random.default_rng(37)
    x = np.ascontiguousarray(rng.normal(size=(1, 2, 9, 9)))
    w = np.ascontiguousarray(rng.normal(size=(3, 2, 3, 3)))
    y = numpy_ops.conv2d_forward(x, w, stride, dilation)
    gy = np.ascontiguousarray(rng.normal(size=y.shape))

    gx_c = compiled.conv2d_backward_input(gy, w, x.shape, stride, dilation)
    gx_n = numpy_ops.conv2d_backward_input(gy, w, x.shape, stride, dilation)
    np.testing.assert_allclose(gx_c, gx_n, rtol=1e-12, atol=1e-12)

    gw_c = compiled.conv2d_backward_weight(gy, x, w.shape, stride, dilation)
    gw_n = numpy_ops.conv2d_backward_weight(gy, x, w.shape, stride, dilation)
    np.testing.assert_allclose(gw_c, gw_n, rtol=1e-12, atol=1e-12)


def test_backend_constant_is_exposed():
    assert _kernels.BACKEND in ("compiled", "python")
    assert callable(_kernels.conv2d_forward)
