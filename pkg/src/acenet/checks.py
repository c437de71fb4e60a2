"""Finite-difference self-checks exposed to the command line.

Two layers: a per-primitive sweep with a tight threshold, and a check of
every parameter of a tiny full network with a looser one (the composition
of many float64 ops accumulates slightly more noise).  Inputs are seeded
draws nudged away from relu/maxpool kinks where needed, so the difference
quotients stay trustworthy.
"""

from dataclasses import dataclass
from typing import List

import numpy as np

from acenet.autodiff import Tensor, grad_check, ops, precision
from acenet.autodiff.tensor import record_op
from acenet.graph import Network, NetworkConfig

PER_OP_THRESHOLD = 1e-4
FULL_GRAPH_THRESHOLD = 1e-3

# frozen after scanning: all relu pre-activations in the tiny network stay
# clear of the finite-difference step at this draw
FULL_GRAPH_SEED = 0


@dataclass
class CheckResult:
    name: str
    max_error: float
    threshold: float

    @property
    def ok(self) -> bool:
        return self.max_error < self.threshold


def _sumsq(y):
    out = Tensor((y.data ** 2).sum(), requires_grad=y.requires_grad, dtype=y.dtype)

    def backward(gy):
        y.accumulate_grad(2.0 * y.data * gy)

    return record_op(out, backward)


def _sumsq_many(tensors):
    total = float(sum((t.data ** 2).sum() for t in tensors))
    out = Tensor(np.asarray(total), requires_grad=True, dtype=tensors[0].dtype)

    def backward(gy):
        for t in tensors:
            t.accumulate_grad(2.0 * t.data * gy)

    return record_op(out, backward)


def per_op_checks(seed: int = 0) -> List[CheckResult]:
    """Gradient check every differentiable primitive at float64."""
    results = []
    with precision("float64"):
        rng = np.random.default_rng(seed)

        def t(shape):
            return Tensor(rng.normal(size=shape), requires_grad=True)

        x, w, b = t((1, 2, 6, 6)), t((3, 2, 3, 3)), t((3,))
        results.append(CheckResult("conv2d", grad_check(
            lambda: _sumsq(ops.conv2d(x, w, b)), [x, w, b]), PER_OP_THRESHOLD))

        for d in (2, 4):
            xd, wd, bd = t((1, 2, 9, 9)), t((2, 2, 3, 3)), t((2,))
            results.append(CheckResult(f"conv2d_dilation{d}", grad_check(
                lambda: _sumsq(ops.conv2d(xd, wd, bd, dilation=d)), [xd, wd, bd]),
                PER_OP_THRESHOLD))

        xt, wt, bt = t((1, 3, 4, 4)), t((3, 2, 2, 2)), t((2,))
        results.append(CheckResult("transposed_conv2x2", grad_check(
            lambda: _sumsq(ops.transposed_conv2x2(xt, wt, bt)), [xt, wt, bt]),
            PER_OP_THRESHOLD))

        xm = t((1, 2, 6, 6))
        results.append(CheckResult("maxpool2x2", grad_check(
            lambda: _sumsq(ops.maxpool2x2(xm)), [xm]), PER_OP_THRESHOLD))

        xr = t((1, 2, 4, 6))
        results.append(CheckResult("resize_bilinear", grad_check(
            lambda: _sumsq(ops.resize_bilinear(xr, 7, 9)), [xr]), PER_OP_THRESHOLD))

        ca, cb = t((1, 2, 4, 4)), t((1, 3, 4, 4))
        results.append(CheckResult("concat_channels", grad_check(
            lambda: _sumsq(ops.concat_channels([ca, cb])), [ca, cb]), PER_OP_THRESHOLD))

        vals = rng.normal(size=(1, 2, 5, 5))
        vals[np.abs(vals) < 0.05] = 0.1
        xl = Tensor(vals, requires_grad=True)
        results.append(CheckResult("relu", grad_check(
            lambda: _sumsq(ops.relu(xl)), [xl]), PER_OP_THRESHOLD))

        logits = t((1, 3, 4, 4))
        labels = rng.integers(0, 3, size=(1, 4, 4))
        mask = rng.random((1, 4, 4)) > 0.25
        results.append(CheckResult("softmax_cross_entropy", grad_check(
            lambda: ops.softmax_cross_entropy(logits, labels, mask), [logits]),
            PER_OP_THRESHOLD))
    return results


def full_graph_check(depth: int = 2, base_width: int = 2, size: int = 8,
                     seed: int = FULL_GRAPH_SEED) -> CheckResult:
    """Finite differences over every parameter of a tiny network.

    Freshly built networks have all-zero biases, which parks every
    relu-dead pixel's pre-activation exactly on the kink; a perturbed bias
    then crosses it and the difference quotient stops meaning anything.
    Drawing the biases from a small normal moves the check to a generic
    point, where a kink hit has probability zero.
    """
    with precision("float64"):
        rng = np.random.default_rng(seed)
        cfg = NetworkConfig(depth=depth, base_width=base_width, in_channels=1)
        net = Network(cfg, seed=seed)
        for p in net.parameter_list():
            if p.name.endswith("/bias"):
                p.data[...] = rng.normal(size=p.shape, scale=0.1)
        x = Tensor(rng.normal(size=(1, 1, size, size)))

        def f():
            out = net.forward(x)
            return _sumsq_many([out.final_logits] + out.side_logits)

        err = grad_check(f, net.parameter_list(), eps=1e-5)
    return CheckResult(f"full_graph_depth{depth}_width{base_width}_{size}x{size}",
                       err, FULL_GRAPH_THRESHOLD)
