"""Minimal differentiable network engine (numpy)."""

from .layers import ShapeError, sigmoid, softmax
from .network import (
    History,
    Network,
    TrainState,
    backward,
    build_network,
    cross_entropy,
    evaluate,
    forward,
    optimizer_step,
    train,
)
from .optim import SGD, Adam, RMSprop, make_optimizer

__all__ = [
    "Adam",
    "History",
    "Network",
    "RMSprop",
    "SGD",
    "ShapeError",
    "TrainState",
    "backward",
    "build_network",
    "cross_entropy",
    "evaluate",
    "forward",
    "make_optimizer",
    "optimizer_step",
    "sigmoid",
    "softmax",
    "train",
]
