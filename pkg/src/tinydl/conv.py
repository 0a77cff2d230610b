"""Convolution kernels for NHWC tensors.

Two independent routes compute the same correlation: :func:`conv2d_direct`
walks every output pixel with explicit loops and is kept as the reference,
while :func:`im2col` / :func:`col2im` lower the work onto one matrix product
for the layers.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError


def output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(size / stride)
    if padding == "valid":
        if kernel > size:
            raise ShapeError(f"window {kernel} larger than input extent {size}")
        return (size - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def pad_amounts(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    """Zeros added before/after one spatial axis (TensorFlow's SAME split)."""
    if padding == "valid":
        return 0, 0
    out = output_size(size, kernel, stride, padding)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def pad_input(x: np.ndarray, kernel: int, stride: int, padding: str):
    _, h, w, _ = x.shape
    ph = pad_amounts(h, kernel, stride, padding)
    pw = pad_amounts(w, kernel, stride, padding)
    if ph == (0, 0) and pw == (0, 0):
        return x, ph, pw
    return np.pad(x, ((0, 0), ph, pw, (0, 0))), ph, pw


def im2col(xp: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Patches of an already padded NHWC batch.

    Returns an array of shape ``(B, Ho, Wo, k*k*d)`` whose last axis is the
    receptive field flattened in (row, col, channel) order, matching a
    filter bank stored as ``[n, k, k, d]``.
    """
    b, hp, wp, d = xp.shape
    if kernel > hp or kernel > wp:
        raise ShapeError(f"window {kernel} larger than padded input {hp}x{wp}")
    win = sliding_window_view(xp, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, d, k, k)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(cols).reshape(b, ho, wo, kernel * kernel * d)


def col2im(dcols: np.ndarray, padded_shape, kernel: int, stride: int) -> np.ndarray:
    """Scatter-add patch gradients back onto the padded input grid."""
    b, ho, wo, _ = dcols.shape
    d = padded_shape[3]
    dcols = dcols.reshape(b, ho, wo, kernel, kernel, d)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    return dxp


def conv2d_direct(x, filters, bias, stride=1, padding="same"):
    """Reference convolution with one explicit loop per output coordinate."""
    n, k, _, d = filters.shape
    if x.shape[3] != d:
        raise ShapeError(f"input has {x.shape[3]} channels, filters expect {d}")
    xp, _, _ = pad_input(x, k, stride, padding)
    b = x.shape[0]
    ho = (xp.shape[1] - k) // stride + 1
    wo = (xp.shape[2] - k) // stride + 1
    out = np.zeros((b, ho, wo, n))
    for s in range(b):
        for r in range(ho):
            for c in range(wo):
                for f in range(n):
                    acc = bias[f]
                    for i in range(k):
                        for j in range(k):
                            for ch in range(d):
                                acc += xp[s, r * stride + i, c * stride + j, ch] * filters[f, i, j, ch]
                    out[s, r, c, f] = acc
    return out
