from .layers import (
    Conv2d,
    GlobalAveragePool,
    Layer,
    MaxPool2x2,
    Relu,
    ShapeError,
    Sigmoid,
    Unpool2x2,
    layer_from_spec,
)
from .network import ForwardCache, Gradients, Network, StaleCacheError, check_tensor
from .optim import SGD, Adam, DivergenceError
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, gradient_check, sweep_configs

__all__ = [
    "Adam",
    "Conv2d",
    "DivergenceError",
    "ForwardCache",
    "GlobalAveragePool",
    "GradCheckReport",
    "Gradients",
    "Layer",
    "MaxPool2x2",
    "Network",
    "Relu",
    "SGD",
    "ShapeError",
    "Sigmoid",
    "StaleCacheError",
    "Unpool2x2",
    "check_tensor",
    "gradient_check",
    "layer_from_spec",
    "load_checkpoint",
    "save_checkpoint",
    "sweep_configs",
]
