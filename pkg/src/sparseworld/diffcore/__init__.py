from .rng import RngStream, mix64
from .tensor import (
    ContractError,
    DimensionError,
    ParameterError,
    Tape,
    Tensor,
    add,
    backward,
    broadcast_to,
    concat,
    div,
    embedding,
    exp,
    gumbel_sigmoid,
    layer_norm,
    linear,
    log,
    masked_softmax,
    matmul,
    maximum_scalar,
    mean_,
    mse,
    mul,
    neg,
    power,
    relu,
    reshape,
    sigmoid,
    sub,
    sum_,
    swap_last2,
    take,
    tanh,
    transpose,
)
from .optim import AdamState, adam_step
from .gradcheck import grad_check

__all__ = [
    "RngStream",
    "mix64",
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "AdamState",
    "adam_step",
    "DimensionError",
    "ContractError",
    "ParameterError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "relu",
    "maximum_scalar",
    "matmul",
    "linear",
    "layer_norm",
    "mse",
    "masked_softmax",
    "gumbel_sigmoid",
    "sum_",
    "mean_",
    "reshape",
    "transpose",
    "swap_last2",
    "broadcast_to",
    "concat",
    "take",
    "embedding",
]
