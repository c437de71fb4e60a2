"""Finite-difference verification of tape adjoints."""

import numpy as np

from acenet.autodiff.tensor import Tape
from acenet.errors import UsageError


def grad_check(f, inputs, eps=1e-4):
    """Max relative error between tape adjoints and central differences.

    f is a no-argument callable returning a scalar Tensor and closing over
    `inputs`; each input element is perturbed by +-eps and the numeric slope
    (f+ - f-)/(2 eps) is compared against the tape adjoint with denominator
    max(|a|, |n|, 1e-8).  Run under float64 precision for meaningful
    thresholds.
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise UsageError(f"grad_check: expression must be scalar-valued, got shape {out.data.shape}")
    tape.backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    max_err = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = float(f().data)
            flat[i] = saved - eps
            fm = float(f().data)
            flat[i] = saved
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            max_err = max(max_err, err)
    return max_err
