"""Differentiable tensor substrate: primitives, modules, gradient checks, PTM1 I/O."""

from streampoint.substrate.gradcheck import gradient_check
from streampoint.substrate.nn import (
    MLP,
    Block,
    CrossAttention,
    LayerNorm,
    Linear,
    ModulatedBlock,
    ModulatedLayerNorm,
    Module,
    Parameter,
    SelfAttention,
    attention,
)
from streampoint.substrate.tensor import (
    Tensor,
    add,
    checked,
    concat,
    div,
    exp,
    gather,
    gelu,
    is_grad_enabled,
    l2norm,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    modulated_layer_norm,
    mul,
    no_grad,
    reshape,
    rope_apply,
    scale,
    sigmoid,
    slice_axis,
    softmax,
    split,
    sqrt,
    stack,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "MLP",
    "Block",
    "CrossAttention",
    "LayerNorm",
    "Linear",
    "ModulatedBlock",
    "ModulatedLayerNorm",
    "Module",
    "Parameter",
    "SelfAttention",
    "Tensor",
    "add",
    "attention",
    "checked",
    "concat",
    "div",
    "exp",
    "gather",
    "gelu",
    "gradient_check",
    "is_grad_enabled",
    "l2norm",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mean",
    "modulated_layer_norm",
    "mul",
    "no_grad",
    "reshape",
    "rope_apply",
    "scale",
    "sigmoid",
    "slice_axis",
    "softmax",
    "split",
    "sqrt",
    "stack",
    "sub",
    "transpose",
    "tsum",
]
