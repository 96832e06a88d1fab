from . import ops
from .checkpoint import load_tensors, save_tensors
from .core import (
    DomainError,
    Graph,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    current_graph,
)
from .gradcheck import analytic_grad, finite_diff_check, numeric_grad
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "DomainError", "Graph", "GraphError", "NonFiniteError",
    "ShapeError", "Tensor", "adam_step", "analytic_grad", "backward",
    "current_graph", "finite_diff_check", "load_tensors", "numeric_grad", "ops",
    "save_tensors",
]
