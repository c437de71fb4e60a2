"""Kernel backend selection.

Convolution forward/backward is the hot loop of the whole engine, so it
exists twice with identical signatures: a vectorized numpy implementation
and a compiled Cython core (built by setup.py).  On installs whose numpy
rides an optimized BLAS the numpy path is the faster one at this package's
shapes — benchmarks/bench_kernels.py measures both — so "auto" picks it;
the compiled core is the portable floor for numpy builds without good
BLAS.  Set ACENET_KERNELS=compiled or =python to force a choice at import.
"""

import os

from acenet._kernels import numpy_ops

_choice = os.environ.get("ACENET_KERNELS", "auto")
if _choice not in ("auto", "compiled", "python"):
    raise ImportError(
        f"ACENET_KERNELS must be 'auto', 'compiled' or 'python', got {_choice!r}"
    )

if _choice == "compiled":
    from acenet._kernels import _core as _impl

    BACKEND = "compiled"
else:
    _impl = numpy_ops
    BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
