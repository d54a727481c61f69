"""Reverse-mode autodiff engine: tensors, kernels, parameters, optimizer."""

from . import kernels
from .gradcheck import GradCheckResult, grad_check, relative_error
from .optim import Adam, AdamConfig, clip_gradients, global_grad_norm
from .params import ParameterStore
from .tensor import (
    DiffTensor,
    NonFiniteError,
    add,
    add_bias,
    add_const,
    add_rowcol,
    atan,
    clamp,
    concat_cols,
    constant,
    cos,
    div,
    exp,
    gather_pairs,
    gather_rows,
    leaky_relu,
    log,
    masked_softmax,
    matmul,
    mean_all,
    mul,
    neg,
    parameter,
    pow_const,
    reshape,
    scal,
    scale_rows,
    scatter_pairs,
    scatter_rows,
    sigmoid,
    sin,
    smooth_l1,
    split_cols,
    sub,
    sum_all,
    sum_cols,
    sum_rows,
)

__all__ = [
    "Adam",
    "AdamConfig",
    "DiffTensor",
    "GradCheckResult",
    "NonFiniteError",
    "ParameterStore",
    "add",
    "add_bias",
    "add_const",
    "add_rowcol",
    "atan",
    "clamp",
    "clip_gradients",
    "concat_cols",
    "constant",
    "cos",
    "div",
    "exp",
    "gather_pairs",
    "gather_rows",
    "global_grad_norm",
    "grad_check",
    "kernels",
    "leaky_relu",
    "log",
    "masked_softmax",
    "matmul",
    "mean_all",
    "mul",
    "neg",
    "parameter",
    "pow_const",
    "relative_error",
    "reshape",
    "scal",
    "scale_rows",
    "scatter_pairs",
    "scatter_rows",
    "sigmoid",
    "sin",
    "smooth_l1",
    "split_cols",
    "sub",
    "sum_all",
    "sum_cols",
    "sum_rows",
]
