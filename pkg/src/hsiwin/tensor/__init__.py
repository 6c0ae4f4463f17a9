"""Minimal dense tensor engine with reverse-mode autodiff."""
from .core import Tensor, tensor, unbroadcast, zero_grad
from .functional import (
    SELU_ALPHA,
    SELU_LAMBDA,
    ActivationSpec,
    BatchNormState,
    activate,
    batch_norm,
    conv2d,
    depthwise_conv2d,
    dropout,
    gelu,
    layer_norm,
    linear,
    masked_softmax_ce,
    se_module,
    selu,
    sigmoid,
    silu,
)
from .gradcheck import gradcheck, relative_error

__all__ = [
    "Tensor",
    "tensor",
    "unbroadcast",
    "zero_grad",
    "SELU_ALPHA",
    "SELU_LAMBDA",
    "ActivationSpec",
    "BatchNormState",
    "activate",
    "batch_norm",
    "conv2d",
    "depthwise_conv2d",
    "dropout",
    "gelu",
    "layer_norm",
    "linear",
    "masked_softmax_ce",
    "se_module",
    "selu",
    "sigmoid",
    "silu",
    "gradcheck",
    "relative_error",
]
