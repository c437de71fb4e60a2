"""Dense tensors with reverse-mode differentiation on an explicit tape.

The engine is eager: every primitive computes its value immediately and,
when a Tape is active and some input requires gradients, appends the output
node to the tape.  Creation order is a topological order of the graph, so
replaying the tape in reverse visits each node after all of its consumers.

Scalar precision is a module-wide switch: float32 for training buffers,
float64 for gradient checks (see `precision`).
"""

import threading

import numpy as np

from acenet.errors import UsageError

_FLOAT_DTYPES = {"float32": np.float32, "float64": np.float64}

_state = threading.local()


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(name):
    if name not in _FLOAT_DTYPES:
        raise UsageError(f"unsupported precision {name!r}, expected float32 or float64")
    _state.dtype = _FLOAT_DTYPES[name]


class precision:
    """Context manager switching the engine-wide scalar precision."""

    def __init__(self, name):
        if name not in _FLOAT_DTYPES:
            raise UsageError(f"unsupported precision {name!r}, expected float32 or float64")
        self._dtype = _FLOAT_DTYPES[name]

    def __enter__(self):
        self._saved = default_dtype()
        _state.dtype = self._dtype
        return self

    def __exit__(self, *exc):
        _state.dtype = self._saved
        return False


class Tensor:
    """Dense numeric array participating in the autodiff graph.

    Network feature maps are 4-D (batch, channels, height, width); biases
    are 1-D and loss values 0-D.  `grad` is allocated lazily on the first
    adjoint accumulation and always matches `data` in shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with a unique slash-separated name, e.g. "acb3/icm/aspp/branch_r2/weight"."""

    __slots__ = ("name",)

    def __init__(self, name, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Tape:
    """Ordered record of executed primitives, replayed in reverse for adjoints."""

    def __init__(self):
        self._nodes = []
        self._replayed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self
        return False

    def record(self, node):
        self._nodes.append(node)

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        """Seed `loss` with adjoint 1 and propagate through every recorded node.

        Nodes that never receive an adjoint (not ancestors of `loss`) are
        skipped.  A tape can be replayed only once; rerun the forward pass
        on a fresh tape for another gradient.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if self._replayed:
            raise UsageError("tape already replayed; record a fresh forward pass")
        self._replayed = True
        loss.accumulate_grad(np.ones_like(loss.data))
        for node in reversed(self._nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


def record_op(out, backward_fn):
    """Attach a backward closure to `out` and record it if a tape is active."""
    tape = active_tape()
    if tape is not None and out.requires_grad:
        out._backward = backward_fn
        tape.record(out)
    return out
