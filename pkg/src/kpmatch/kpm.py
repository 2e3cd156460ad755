"""Kronecker-product matching between two feature maps.

Feature maps are ``C×H×W`` tensors, or ``N×C×H×W`` for a batch of pairs.
Internally spatial positions are flattened row-major, ``m = i * W + j``, so
the four-way similarity tensor ``K[i, j, p, q]`` is handled as an ``M×M``
matrix with ``M = H * W``.  The first map ``X`` is always the reference; the
second map ``Y`` is warped onto it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor

DEFAULT_TAU_KPM = 0.05
ROW_SUM_TOL = 1e-6


@dataclass
class MatchKernel:
    """Raw similarities and their temperature-softmax normalisation.

    ``raw`` and ``normalized`` share one layout: ``H×W×H×W`` for a single
    pair, ``M×M`` or ``N×M×M`` in flattened form.
    """

    raw: Tensor
    normalized: Tensor
    tau_kpm: float

    @property
    def flat(self) -> bool:
        return self.normalized.ndim != 4


def _check_pair(x: Tensor, y: Tensor):
    if x.ndim not in (3, 4) or x.shape != y.shape:
        raise DimensionError(f"feature maps must share a C×H×W shape, got {x.shape} and {y.shape}")


def _flatten_spatial(t: Tensor) -> Tensor:
    *lead, h, w = t.shape
    return ops.reshape(t, (*lead, h * w))


def similarity_matrix(x: Tensor, y: Tensor) -> Tensor:
    """Inner products of every reference location with every location of ``y``.

    Equivalent to using the spatially permuted ``x`` as a bank of ``1×1``
    filters over ``y``: the reference map is laid out as ``M×C`` and
    multiplied against ``y`` laid out as ``C×M``.
    """
    _check_pair(x, y)
    xf = _flatten_spatial(x)
    yf = _flatten_spatial(y)
    perm = (1, 0) if x.ndim == 3 else (0, 2, 1)
    return ops.matmul(ops.transpose(xf, perm), yf)


def kron_similarity(x: Tensor, y: Tensor) -> Tensor:
    """``H×W×H×W`` tensor with ``K[i, j, p, q] = <x(i, j), y(p, q)>``."""
    if x.ndim != 3:
        raise DimensionError("kron_similarity takes a single C×H×W pair; use similarity_matrix for batches")
    _, h, w = x.shape
    return ops.reshape(similarity_matrix(x, y), (h, w, h, w))


def kron_similarity_loops(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Reference quadruple loop over ``(i, j, p, q)``; slow, for verification."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3 or x.shape != y.shape:
        raise DimensionError(f"feature maps must share a C×H×W shape, got {x.shape} and {y.shape}")
    _, h, w = x.shape
    out = np.empty((h, w, h, w))
    for i in range(h):
        for j in range(w):
            xv = x[:, i, j]
            for p in range(h):
                for q in range(w):
                    out[i, j, p, q] = np.dot(xv, y[:, p, q])
    return out


def normalize_matching(k: Tensor, tau_kpm: float = DEFAULT_TAU_KPM) -> MatchKernel:
    if not tau_kpm > 0:
        raise ParameterError(f"tau_kpm must be positive, got {tau_kpm}")
    axes = (2, 3) if k.ndim == 4 else -1
    return MatchKernel(k, ops.softmax_scaled(k, axis=axes, tau=tau_kpm), float(tau_kpm))


def _rows(km: MatchKernel) -> Tensor:
    kn = km.normalized
    if kn.ndim == 4:
        h, w = kn.shape[:2]
        return ops.reshape(kn, (h * w, h * w))
    return kn


def soft_warp(y: Tensor, km: MatchKernel) -> Tensor:
    """Warp ``y`` onto the reference grid: ``ŷ_i = Σ_j K̃[i, j] y_j``."""
    rows = _rows(km)
    sums = rows.data.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > ROW_SUM_TOL:
        raise ContractError("matching kernel is not row-normalised")
    if y.ndim not in (3, 4):
        raise DimensionError(f"expected C×H×W or N×C×H×W, got {y.shape}")
    m = y.shape[-1] * y.shape[-2]
    if rows.shape[-1] != m or rows.ndim != y.ndim - 1 or (y.ndim == 4 and rows.shape[0] != y.shape[0]):
        raise DimensionError(f"kernel {rows.shape} does not fit feature map {y.shape}")
    yf = _flatten_spatial(y)
    perm = (1, 0) if rows.ndim == 2 else (0, 2, 1)
    return ops.reshape(ops.matmul(yf, ops.transpose(rows, perm)), y.shape)


def difference_map(x: Tensor, y_warped: Tensor) -> Tensor:
    return ops.sub(x, y_warped)


def match_entropy(km: MatchKernel) -> np.ndarray:
    """Shannon entropy (nats) of each reference location's matching distribution."""
    p = km.normalized.data
    axes = (2, 3) if p.ndim == 4 else -1
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=axes)


def match(x: Tensor, y: Tensor, tau_kpm: float = DEFAULT_TAU_KPM) -> tuple[Tensor, MatchKernel]:
    """Full chain: similarities, normalisation, warping and difference map."""
    km = normalize_matching(similarity_matrix(x, y), tau_kpm)
    return difference_map(x, soft_warp(y, km)), km
