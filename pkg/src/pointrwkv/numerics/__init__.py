from . import ops
from .checkpoint import CheckpointError, load_arrays, load_module, save_arrays, save_module
from .gradcheck import fd_check, fd_check_directional, fd_check_many
from .nn import MLP, LayerNorm, Linear, Module, parameter
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    as_tensor,
    backward,
    first_nonfinite,
    get_dtype,
    grad_enabled,
    no_grad,
    precision,
    set_precision,
    trace,
)

__all__ = [
    "ops",
    "CheckpointError",
    "ContractError",
    "DimensionError",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "Tensor",
    "as_tensor",
    "backward",
    "fd_check",
    "fd_check_directional",
    "fd_check_many",
    "first_nonfinite",
    "get_dtype",
    "grad_enabled",
    "load_arrays",
    "load_module",
    "no_grad",
    "parameter",
    "precision",
    "save_arrays",
    "save_module",
    "set_precision",
    "trace",
]
