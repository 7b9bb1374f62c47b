"""Dense numeric kernels shared by the TTT layer, backbone and harness.

Everything works on float64 numpy arrays. LayerNorm and its backward act on
the last axis so the same code handles a single vector or a batch of rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

LN_EPS = 1e-6
DTYPE = np.float64


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TriangularMask:
    """Lower-triangular mask; entry (i, j) is active iff ``j <= i + k``."""

    size: int
    diagonal_offset: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("mask size must be >= 1")
        if self.diagonal_offset not in (0, -1):
            raise ValueError("diagonal_offset must be 0 or -1")

    def array(self) -> np.ndarray:
        return np.tril(np.ones((self.size, self.size), dtype=DTYPE), k=self.diagonal_offset)


@dataclass(frozen=True)
class LayerNormCache:
    mean: np.ndarray
    inv_std: np.ndarray
    x_hat: np.ndarray
    gamma: np.ndarray


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


def layer_norm_forward(x, gamma, beta, eps: float = LN_EPS):
    """Normalize over the last axis; returns ``(y, cache)``."""
    x = np.asarray(x, dtype=DTYPE)
    gamma = np.asarray(gamma, dtype=DTYPE)
    beta = np.asarray(beta, dtype=DTYPE)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("layer_norm_forward needs a non-empty last axis")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match feature dim {x.shape[-1]}"
        )
    if not eps > 0:
        raise ValueError("eps must be positive")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    y = gamma * x_hat + beta
    return y, LayerNormCache(mean=mean, inv_std=inv_std, x_hat=x_hat, gamma=gamma)


def layer_norm_backward(grad_y, cache: LayerNormCache) -> np.ndarray:
    """Vector-Jacobian product of :func:`layer_norm_forward` w.r.t. ``x``."""
    if not isinstance(cache, LayerNormCache):
        raise ShapeError("layer_norm_backward requires the cache from layer_norm_forward")
    grad_y = np.asarray(grad_y, dtype=DTYPE)
    if grad_y.shape != cache.x_hat.shape:
        raise ShapeError(f"grad_y shape {grad_y.shape} != cached shape {cache.x_hat.shape}")
    g = grad_y * cache.gamma
    n = g.shape[-1]
    # dx = inv_std * (g - mean(g) - x_hat * mean(g * x_hat))
    return cache.inv_std * (
        g - g.sum(axis=-1, keepdims=True) / n
        - cache.x_hat * (g * cache.x_hat).sum(axis=-1, keepdims=True) / n
    )


def causal_conv1d(seq, kernel) -> np.ndarray:
    """Depthwise causal convolution with left zero padding.

    ``out[t, c] = sum_w kernel[w, c] * seq[t - w, c]``; tap 0 is the current
    position, tap 1 the previous one and so on.
    """
    seq = np.asarray(seq, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if seq.ndim != 2 or kernel.ndim != 2:
        raise ShapeError("causal_conv1d expects 2-D seq (T, d) and kernel (width, d)")
    width, d = kernel.shape
    if width == 0:
        raise ShapeError("kernel width must be >= 1")
    if seq.shape[1] != d:
        raise ShapeError(f"channel mismatch: seq has {seq.shape[1]}, kernel has {d}")
    T = seq.shape[0]
    out = np.zeros_like(seq)
    for w in range(min(width, T)):
        out[w:] += kernel[w] * seq[: T - w]
    return out


def tril_weighted_sum(scores, mask: TriangularMask) -> np.ndarray:
    scores = np.asarray(scores, dtype=DTYPE)
    if scores.shape != (mask.size, mask.size):
        raise ShapeError(f"scores shape {scores.shape} does not match mask size {mask.size}")
    return np.tril(scores, k=mask.diagonal_offset)


def nearest_rank_percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ``ceil(q * n)``-th smallest value (1-based)."""
    vals = sorted(float(v) for v in values)
    if not vals:
        raise ValueError("nearest_rank_percentile of an empty list")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    n = len(vals)
    idx = math.ceil(q * n) - 1
    return vals[min(max(idx, 0), n - 1)]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sigmoid(x) -> np.ndarray:
    return expit(np.asarray(x, dtype=DTYPE))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("pearson expects two 1-D arrays of equal length")
    if x.size < 3:
        raise ValueError("correlation needs at least 3 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for a constant input")
    return float(xc @ yc) / (sx * sy)


def spearman(x, y) -> float:
    return pearson(rankdata(np.asarray(x, dtype=DTYPE)), rankdata(np.asarray(y, dtype=DTYPE)))
