"""Minimal differentiable substrate: transformer layers, Adam, gradient checks."""
from __future__ import annotations

import numpy as np

from .core import (
    Dense,
    Embedding,
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadAttention,
    Params,
    PositionalEmbedding,
    TransformerBlock,
    TransformerStack,
    gelu,
    log_softmax,
    softmax,
)
from .gradcheck import check_module, finite_diff_check
from .optim import NonFiniteGradient, OptimizerState, optimizer_step

__all__ = [
    "Dense",
    "Embedding",
    "FeedForward",
    "LayerNorm",
    "Module",
    "MultiHeadAttention",
    "NonFiniteGradient",
    "OptimizerState",
    "Params",
    "PositionalEmbedding",
    "TransformerBlock",
    "TransformerStack",
    "backward",
    "check_module",
    "finite_diff_check",
    "forward",
    "gelu",
    "log_softmax",
    "optimizer_step",
    "softmax",
]


def forward(stack: TransformerStack, tokens: np.ndarray) -> np.ndarray:
    """Run a stack on one (length, dim) sequence or a (batch, length, dim) batch."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 2:
        return stack.forward(tokens[None])[0]
    return stack.forward(tokens)


def backward(stack: TransformerStack, loss_gradient: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the stack's parameters, as a fresh flat vector."""
    dy = np.asarray(loss_gradient, dtype=np.float64)
    if dy.ndim == 2:
        dy = dy[None]
    stack.gradient[...] = 0.0
    stack.backward(dy)
    return stack.gradient.copy()
