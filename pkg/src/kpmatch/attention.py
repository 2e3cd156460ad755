"""Residual self-attention over the reference feature map.

A two-layer ``1×1`` conv head scores every location of ``X``; the scores are
softmax-normalised over space and used as residual weights ``1 + ã`` when
the per-location difference vectors are summed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DimensionError, ParameterError
from .nn import Layers, ParamSet
from .tensor import Tensor

DEFAULT_TAU_RSA = 1.0


@dataclass
class AttentionMap:
    raw: Tensor          # N×1×H×W (or 1×H×W) head output
    normalized: Tensor   # same shape, sums to one over space
    tau_rsa: float

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 + self.normalized.data


def init_rsa(params: ParamSet, rng: np.random.Generator, prefix: str, channels: int, hidden: int) -> None:
    params.conv(rng, f"{prefix}.conv1", hidden, channels, 1)
    params.bn(f"{prefix}.bn1", hidden)
    params.conv(rng, f"{prefix}.conv2", 1, hidden, 1)
    params.bn(f"{prefix}.bn2", 1)


def rsa_forward(x: Tensor, layers: Layers, prefix: str = "rsa", tau_rsa: float = DEFAULT_TAU_RSA) -> AttentionMap:
    """Attention map for ``C×H×W`` or ``N×C×H×W`` features."""
    if not tau_rsa > 0:
        raise ParameterError(f"tau_rsa must be positive, got {tau_rsa}")
    expected = layers.w[f"{prefix}.conv1.weight"].shape[1]
    if x.ndim not in (3, 4) or x.shape[-3] != expected:
        raise DimensionError(f"attention head expects {expected} channels, got {x.shape}")
    single = x.ndim == 3
    xb = ops.reshape(x, (1, *x.shape)) if single else x
    h = ops.relu(layers.bn(layers.conv(xb, f"{prefix}.conv1"), f"{prefix}.bn1"))
    a = ops.relu(layers.bn(layers.conv(h, f"{prefix}.conv2"), f"{prefix}.bn2"))
    a_tilde = ops.softmax_scaled(a, axis=(2, 3), tau=tau_rsa)
    if single:
        a = ops.reshape(a, a.shape[1:])
        a_tilde = ops.reshape(a_tilde, a_tilde.shape[1:])
    return AttentionMap(a, a_tilde, float(tau_rsa))


def weighted_reduce(delta: Tensor, att: AttentionMap) -> Tensor:
    """``Σ_{i,j} (1 + ã(i, j)) · δ(:, i, j)``; returns ``C`` or ``N×C``."""
    weights = att.normalized
    if delta.ndim not in (3, 4) or weights.shape[-2:] != delta.shape[-2:] or weights.ndim != delta.ndim:
        raise DimensionError(f"difference map {delta.shape} does not fit attention map {weights.shape}")
    *lead, c, h, w = delta.shape
    m = h * w
    alpha = ops.add_scalar(ops.reshape(weights, (*lead, m, 1)), 1.0)
    flat = ops.reshape(delta, (*lead, c, m))
    return ops.reshape(ops.matmul(flat, alpha), (*lead, c))
