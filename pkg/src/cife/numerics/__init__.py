from . import ops
from .gradcheck import GradCheckReport, grad_check
from .ops import ShapeError
from .tensor import Tape, Tensor, as_tensor, debug_enabled, set_debug

__all__ = [
    "GradCheckReport",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "debug_enabled",
    "grad_check",
    "ops",
    "set_debug",
]
