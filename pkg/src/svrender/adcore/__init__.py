"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Forward ops record their inputs and a vector-Jacobian closure on an implicit
tape (the expression graph); `backward` replays it from a scalar root and
accumulates gradients into every reachable leaf that requires them.
"""

from svrender.adcore.tensor import (
    Tensor,
    NonFiniteError,
    TapeConsumedError,
    backward,
    no_grad,
    grad_enabled,
    constant,
    stop_gradient,
    forward_op,
    OP_REGISTRY,
    add,
    sub,
    mul,
    div,
    neg,
    exp,
    log,
    sqrt,
    square,
    relu,
    elu,
    sigmoid,
    softplus,
    matmul,
    tsum,
    tmean,
    cumsum,
    concat,
    pad,
    reshape,
    transpose,
    moveaxis,
    broadcast_to,
    gather,
    where_mask,
    clamp_min,
)
from svrender.adcore.params import Parameter, ParameterStore
from svrender.adcore.gradcheck import finite_difference_check, NondeterministicError
from svrender.adcore.checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    "Tensor",
    "Parameter",
    "ParameterStore",
    "NonFiniteError",
    "TapeConsumedError",
    "NondeterministicError",
    "backward",
    "no_grad",
    "grad_enabled",
    "constant",
    "stop_gradient",
    "forward_op",
    "OP_REGISTRY",
    "finite_difference_check",
    "save_checkpoint",
    "load_checkpoint",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "relu",
    "elu",
    "sigmoid",
    "softplus",
    "matmul",
    "tsum",
    "tmean",
    "cumsum",
    "concat",
    "pad",
    "reshape",
    "transpose",
    "moveaxis",
    "broadcast_to",
    "gather",
    "where_mask",
    "clamp_min",
]
