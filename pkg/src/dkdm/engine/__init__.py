from dkdm.engine.optim import Adam, adam_update
from dkdm.engine.tensor import (
    Tensor,
    add,
    affine,
    batch_invariant,
    concat,
    conv2d,
    default_dtype,
    exp,
    grad,
    grad_enabled,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    silu,
    square,
    stop_gradient,
    sub,
    tanh,
    tsum,
)

__all__ = [
    "Adam",
    "Tensor",
    "adam_update",
    "add",
    "affine",
    "batch_invariant",
    "concat",
    "conv2d",
    "default_dtype",
    "exp",
    "grad",
    "grad_enabled",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "silu",
    "square",
    "stop_gradient",
    "sub",
    "tanh",
    "tsum",
]
