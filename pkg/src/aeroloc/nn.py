"""Small forward-only layer primitives on ``H x W x C`` float64 arrays."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalise over the last axis (no affine part)."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def linear(x: np.ndarray, w, b=None) -> np.ndarray:
    """``x @ w + b``; ``w=None`` is the identity."""
    if w is None:
        return x
    out = x @ w
    return out + b if b is not None else out


def mlp(x: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    """Two linear layers with softplus between; ``w1=None`` is the identity map."""
    if w1 is None:
        return x
    return linear(softplus(linear(x, w1, b1)), w2, b2)


def conv2d(x: np.ndarray, w: np.ndarray, b=None, stride: int = 1, pad: int | None = None) -> np.ndarray:
    """Dense convolution, ``w`` shaped ``(k, k, c_in, c_out)``.

    ``pad`` defaults to ``k // 2`` so odd kernels give ``ceil(H / stride)``
    outputs.  Extra zero rows/cols are appended when needed to reach that size.
    """
    k = w.shape[0]
    pad = k // 2 if pad is None else pad
    h, wd = x.shape[:2]
    oh, ow = -(-h // stride), -(-wd // stride)
    need_h = (oh - 1) * stride + k
    need_w = (ow - 1) * stride + k
    xp = np.zeros((max(need_h, h + 2 * pad), max(need_w, wd + 2 * pad), x.shape[2]))
    xp[pad:pad + h, pad:pad + wd] = x
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[: (oh - 1) * stride + 1: stride, : (ow - 1) * stride + 1: stride]
    # win: (oh, ow, c_in, k, k)
    out = np.einsum("hwcij,ijcd->hwd", win, w, optimize=True)
    return out + b if b is not None else out


def depthwise_conv3x3(x: np.ndarray, w: np.ndarray, b=None) -> np.ndarray:
    """Per-channel 3x3 convolution with zero padding, ``w`` shaped ``(3, 3, c)``."""
    h, wd = x.shape[:2]
    xp = np.zeros((h + 2, wd + 2, x.shape[2]))
    xp[1:-1, 1:-1] = x
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(3):
        for j in range(3):
            out += xp[i:i + h, j:j + wd] * w[i, j]
    return out + b if b is not None else out


def segment_softmax(logits: np.ndarray, segments: np.ndarray, n_segments: int) -> np.ndarray:
    """Softmax of ``logits[e, ...]`` within groups of equal ``segments[e]``."""
    top = np.full((n_segments,) + logits.shape[1:], -np.inf)
    np.maximum.at(top, segments, logits)
    e = np.exp(logits - top[segments])
    total = np.zeros((n_segments,) + logits.shape[1:])
    np.add.at(total, segments, e)
    return e / total[segments]
