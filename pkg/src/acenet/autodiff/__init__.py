from acenet.autodiff import ops
from acenet.autodiff.adam import AdamState, adam_step
from acenet.autodiff.gradcheck import grad_check
from acenet.autodiff.tensor import (
    Parameter,
    Tape,
    Tensor,
    active_tape,
    default_dtype,
    precision,
    set_default_dtype,
)

__all__ = [
    "AdamState",
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "default_dtype",
    "grad_check",
    "ops",
    "precision",
    "set_default_dtype",
]
