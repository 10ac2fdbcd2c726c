from .autodiff import (
    Node,
    ShapeError,
    add,
    as_node,
    backward,
    causal_conv,
    concat,
    constant,
    diag_scan,
    div,
    evaluate,
    exp,
    expm1_ratio,
    grad_check,
    log,
    matmul,
    mean,
    mul,
    parameter,
    relu,
    reshape,
    scale,
    scatter,
    softplus,
    ssm_kernel,
    sub,
    sum_,
    take,
    tanh,
    transpose,
)
from .rng import RngStream, rng_draw

__all__ = [
    "Node",
    "RngStream",
    "ShapeError",
    "add",
    "as_node",
    "backward",
    "causal_conv",
    "concat",
    "constant",
    "diag_scan",
    "div",
    "evaluate",
    "exp",
    "expm1_ratio",
    "grad_check",
    "log",
    "matmul",
    "mean",
    "mul",
    "parameter",
    "relu",
    "reshape",
    "rng_draw",
    "scale",
    "scatter",
    "softplus",
    "ssm_kernel",
    "sub",
    "sum_",
    "take",
    "tanh",
    "transpose",
]
