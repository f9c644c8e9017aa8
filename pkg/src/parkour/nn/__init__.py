from . import tensor
from .gradcheck import grad_check
from .layers import MLP, Conv2d, CrossAttention, Dense, GRUCell, Module
from .optim import Adam, clip_grad_norm, global_grad_norm
from .serialize import load_arrays, load_into, save_arrays
from .tensor import Graph, GraphStateError, ShapeError, Tensor, no_grad, parameter

__all__ = [
    "tensor", "Tensor", "Graph", "parameter", "no_grad",
    "ShapeError", "GraphStateError",
    "Module", "Dense", "MLP", "Conv2d", "GRUCell", "CrossAttention",
    "Adam", "clip_grad_norm", "global_grad_norm", "grad_check",
    "save_arrays", "load_arrays", "load_into",
]
