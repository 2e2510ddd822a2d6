from . import tensor as ops
from .gradcheck import GradcheckReport, gradcheck, relative_error
from .optim import (
    LrSchedule,
    NonFiniteGradientError,
    OptimState,
    adam,
    adamw,
    clip_grad_norm,
    lr_at,
    optimizer_step,
)
from .params import CheckpointError, ParamSet, load_params, params_from_bytes, params_to_bytes, save_params
from .tensor import ShapeError, TensorNode, backward, inject_fault, no_grad

__all__ = [
    "CheckpointError",
    "GradcheckReport",
    "LrSchedule",
    "NonFiniteGradientError",
    "OptimState",
    "ParamSet",
    "ShapeError",
    "TensorNode",
    "adam",
    "adamw",
    "backward",
    "clip_grad_norm",
    "gradcheck",
    "inject_fault",
    "load_params",
    "lr_at",
    "no_grad",
    "ops",
    "optimizer_step",
    "params_from_bytes",
    "params_to_bytes",
    "relative_error",
    "save_params",
]
