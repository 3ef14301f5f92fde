"""Minimal numpy network substrate: layers, reverse-mode gradients, Adam, checkpoints.

Tensors are plain ``numpy.ndarray`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import checksum, dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from .layers import (
    LAYER_KINDS,
    Activation,
    AttentionBlock,
    Conv1d,
    Dense,
    Layer,
    LayerNorm,
    LayerSpec,
    Residual,
    SelfAttention,
    Sequential,
    build_layer,
    build_sequential,
    sinusoidal_encoding,
)
from .optim import Adam, AdamState, adam_step


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    version: int = 1
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def of(cls, layer: Layer, seed: int = 0, version: int = 1) -> "ModelParams":
        return cls({k: v.copy() for k, v in layer.named_parameters()}, version, seed)

    def checksum(self) -> str:
        return checksum(self.tensors)


def forward(model: Layer, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def backward(model: Layer, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate ``loss_grad`` and return gradients for every parameter."""
    model.backward(loss_grad)
    return model.gradients()


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / diff.size) * diff


def receptive_field(conv_stack: Sequence[tuple[int, int]]) -> int:
    """Frames seen by one output of stacked (kernel_size, dilation) convolutions."""
    if not conv_stack:
        raise ValueError("conv stack must be non-empty")
    return 1 + sum((k - 1) * d for k, d in conv_stack)


__all__ = [
    "LAYER_KINDS",
    "Activation",
    "Adam",
    "AdamState",
    "AttentionBlock",
    "Conv1d",
    "Dense",
    "Layer",
    "LayerNorm",
    "LayerSpec",
    "ModelParams",
    "Residual",
    "SelfAttention",
    "Sequential",
    "adam_step",
    "backward",
    "build_layer",
    "build_sequential",
    "checksum",
    "dumps_checkpoint",
    "forward",
    "load_checkpoint",
    "loads_checkpoint",
    "mse_loss",
    "receptive_field",
    "save_checkpoint",
    "sinusoidal_encoding",
]
