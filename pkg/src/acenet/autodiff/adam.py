"""Adam optimizer with bias correction.

m(t) = b1*m(t-1) + (1-b1)*g
v(t) = b2*v(t-1) + (1-b2)*g^2
p   -= lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)

Moments live per parameter name and match the parameter shape.  Gradients
are left untouched; the caller zeroes them after the step.
"""

from dataclasses import dataclass, field

import numpy as np

from acenet.errors import DataError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state):
    """Apply one Adam update to every parameter; increments state.t by 1."""
    for p in params:
        if p.grad is None:
            raise DataError(f"adam_step: parameter {p.name!r} has no gradient")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
