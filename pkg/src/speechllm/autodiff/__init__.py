from speechllm.autodiff.tensor import (
    Tensor,
    backward,
    concat,
    conv1d,
    cross_entropy,
    custom_op,
    default_dtype,
    gelu,
    get_default_dtype,
    grad_enabled,
    layer_norm,
    log_softmax,
    matmul,
    no_grad,
    softmax,
    stack,
    take_rows,
    tensor,
)
from speechllm.autodiff.params import GROUP_NAMES, Module, ParameterGroup, ParameterRegistry, parameter
from speechllm.autodiff.optim import (
    AdamW,
    AdamWConfig,
    OptimizerState,
    accumulate_and_step,
    adamw_step,
    adamw_update,
    clip_gradients,
)
from speechllm.autodiff.gradcheck import finite_difference_grad, relative_error

__all__ = [
    "Tensor", "backward", "concat", "conv1d", "cross_entropy", "custom_op", "default_dtype",
    "gelu", "get_default_dtype", "grad_enabled", "layer_norm", "log_softmax", "matmul",
    "no_grad", "softmax", "stack", "take_rows", "tensor", "GROUP_NAMES", "Module",
    "ParameterGroup", "ParameterRegistry", "parameter", "AdamW", "AdamWConfig",
    "OptimizerState", "accumulate_and_step", "adamw_step", "adamw_update", "clip_gradients",
    "finite_difference_grad", "relative_error",
]
