from .mlp import (
    MlpParams,
    activation_derivative,
    activation_eval,
    apply_activation,
    forward,
    forward_with_directional,
    init_mlp,
    load_checkpoint,
    parse_activation,
    save_checkpoint,
)
from .optim import AdamaxState, LrSchedule, adamax_step, lr_at
from .tensor import Tensor, as_tensor, linear, matmul, parameter, stack_scalars, take

__all__ = [
    "AdamaxState",
    "LrSchedule",
    "MlpParams",
    "Tensor",
    "activation_derivative",
    "activation_eval",
    "adamax_step",
    "apply_activation",
    "as_tensor",
    "forward",
    "forward_with_directional",
    "init_mlp",
    "linear",
    "load_checkpoint",
    "lr_at",
    "matmul",
    "parameter",
    "parse_activation",
    "save_checkpoint",
    "stack_scalars",
    "take",
]


def backward(scalar: Tensor):
    """Reverse pass from a scalar; returns {leaf tensor: gradient}."""
    return scalar.backward()
