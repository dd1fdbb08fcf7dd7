from .core import Graph, NonFiniteError, ShapeError, Tensor, backward, no_grad
from .ops import apply_primitive
from .optim import RMSProp, rmsprop_step
from .gradcheck import grad_check

__all__ = [
    "Graph", "NonFiniteError", "ShapeError", "Tensor", "backward", "no_grad",
    "apply_primitive", "RMSProp", "rmsprop_step", "grad_check",
]
