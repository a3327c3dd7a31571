"""Batch normalization over 2-D activations with the exact train-mode gradient.

Train mode normalizes with the biased batch variance (divide by K) and
updates running statistics in place; eval mode normalizes with the stored
running statistics. The backward pass differentiates through the batch mean
and variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, ShapeMismatchError, Tensor

__all__ = ["BNState", "batchnorm"]


@dataclass
class BNState:
    gamma: Parameter
    beta: Parameter
    eps: float
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"BN eps must be positive, got {self.eps}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"BN momentum must be in (0, 1), got {self.momentum}")

    @classmethod
    def build(cls, d: int, name_prefix: str, eps: float = 1e-5, momentum: float = 0.1) -> "BNState":
        return cls(
            gamma=Parameter(np.ones(d), f"{name_prefix}.gamma"),
            beta=Parameter(np.zeros(d), f"{name_prefix}.beta"),
            eps=eps,
            running_mean=np.zeros(d),
            running_var=np.ones(d),
            momentum=momentum,
        )


def batchnorm(x: Tensor, state: BNState, train: bool) -> Tensor:
    """Normalize each feature column; affine-restore with learnable gamma/beta."""
    if x.ndim != 2 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeMismatchError(f"batchnorm expects (K, {state.gamma.shape[0]}), got {x.shape}")
    gamma, beta = state.gamma, state.beta

    if train:
        k = x.shape[0]
        if k < 2:
            raise ValueError(f"train-mode batchnorm needs K >= 2 samples, got {k}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)  # biased: divide by K
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu) * inv
        out = gamma.data * xhat + beta.data

        state.running_mean *= 1.0 - state.momentum
        state.running_mean += state.momentum * mu
        state.running_var *= 1.0 - state.momentum
        state.running_var += state.momentum * var

        def backward(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * gamma.data
            dx = (inv / k) * (k * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, dgamma, dbeta

        return Tensor(out, (x, gamma, beta), backward)

    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean) * inv
    out = gamma.data * xhat + beta.data

    def backward_eval(g):
        return g * (gamma.data * inv), (g * xhat).sum(axis=0), g.sum(axis=0)

    return Tensor(out, (x, gamma, beta), backward_eval)
