"""Timing comparison of the compiled and numpy convolution kernels.

Runs each kernel (forward, input adjoint, weight adjoint) over a few
network-realistic shapes with both backends, checks they agree, and
prints per-call times with the speedup.  Usage:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from acenet._kernels import numpy_ops

try:
    from acenet._kernels import _core
except ImportError:
    _core = None

# (label, batch, cin, cout, size, k, stride, dilation)
CASES = [
    ("acb1 3x3      64x64", 1, 16, 16, 64, 3, 1, 1),
    ("acb2 3x3      32x32", 1, 32, 32, 32, 3, 1, 1),
    ("acb4 3x3        8x8", 1, 128, 128, 8, 3, 1, 1),
    ("aspp r4 3x3   64x64", 1, 16, 16, 64, 3, 1, 4),
    ("head 1x1      64x64", 1, 16, 2, 64, 1, 1, 1),
]


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    if _core is None:
        print("compiled backend not built (pip install -e . compiles it); "
              "nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    print(f"{'case':<22} {'kernel':<16} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for label, n, cin, cout, size, k, stride, dilation in CASES:
        pad = dilation * (k - 1) // 2
        x = rng.normal(size=(n, cin, size + 2 * pad, size + 2 * pad)).astype(np.float32)
        w = rng.normal(size=(cout, cin, k, k)).astype(np.float32)
        y = numpy_ops.conv2d_forward(x, w, stride, dilation)
        gy = rng.normal(size=y.shape).astype(np.float32)

        kernels = [
            ("forward", lambda impl: impl.conv2d_forward(x, w, stride, dilation)),
            ("backward_input", lambda impl: impl.conv2d_backward_input(
                gy, w, x.shape, stride, dilation)),
            ("backward_weight", lambda impl: impl.conv2d_backward_weight(
                gy, x, w.shape, stride, dilation)),
        ]
        for kname, call in kernels:
            ref = call(numpy_ops).astype(np.float64)
            got = call(_core).astype(np.float64)
            rel = np.linalg.norm(ref - got) / max(np.linalg.norm(ref), 1e-30)
            if rel > 1e-4:  # float32 kernels differ only in summation order
                print(f"{label} {kname}: BACKENDS DISAGREE (rel {rel:.2e})")
                return 1
            t_np = _best_of(lambda: call(numpy_ops), args.repeats)
            t_c = _best_of(lambda: call(_core), args.repeats)
            print(f"{label:<22} {kname:<16} {t_np * 1e6:>8.0f}us {t_c * 1e6:>8.0f}us "
                  f"{t_np / t_c:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
