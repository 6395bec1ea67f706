from .autodiff import (
    DiffNode,
    NonFiniteError,
    NumericsError,
    ShapeError,
    add,
    add_rowvec,
    as_value,
    clip,
    concat,
    const,
    elu,
    evaluate,
    exp,
    finite_difference_check,
    frobenius_norm,
    gaussian_log_density,
    ge_mask,
    gradient,
    l1_norm,
    leaky_relu,
    log,
    matmul,
    minimum,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    relu,
    reparam_gaussian,
    reshape,
    row_softmax,
    sq_l2_norm,
    sqrt,
    sub,
    tanh,
    transpose,
    var,
)
from .optim import Adam
from .params import ParamGroup, merge_bindings

__all__ = [
    "Adam",
    "DiffNode",
    "NonFiniteError",
    "NumericsError",
    "ParamGroup",
    "ShapeError",
    "add",
    "add_rowvec",
    "as_value",
    "clip",
    "concat",
    "const",
    "elu",
    "evaluate",
    "exp",
    "finite_difference_check",
    "frobenius_norm",
    "gaussian_log_density",
    "ge_mask",
    "gradient",
    "l1_norm",
    "leaky_relu",
    "log",
    "matmul",
    "merge_bindings",
    "minimum",
    "mul",
    "neg",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reparam_gaussian",
    "reshape",
    "row_softmax",
    "sq_l2_norm",
    "sqrt",
    "sub",
    "tanh",
    "transpose",
    "var",
]
