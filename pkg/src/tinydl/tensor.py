"""Dense array primitives shared by every layer.

Tensors are plain ``numpy.ndarray`` values in row-major order, float64 by
default. The helpers here add the shape checks the layers rely on; nothing
broadcasts implicitly except :func:`add_row_broadcast`.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    t = np.array(data, dtype=dtype)
    if t.ndim == 0:
        t = t.reshape(1)
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"every dimension must be >= 1, got {t.shape}")
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def add_row_broadcast(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Add vector ``v`` to every row of ``m``."""
    if m.ndim != 2 or v.ndim != 1 or v.shape[0] != m.shape[1]:
        raise ShapeError(f"cannot add vector {v.shape} to rows of {m.shape}")
    return m + v[None, :]


def reshape(t: np.ndarray, new_shape) -> np.ndarray:
    new_shape = tuple(int(d) for d in new_shape)
    if int(np.prod(new_shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.reshape(t, new_shape)


def reduce(t: np.ndarray, axis: int | None, kind: str) -> np.ndarray:
    """Sum, mean or argmax along ``axis`` (``None`` reduces everything).

    argmax returns the lowest index among ties, which is numpy's behaviour.
    """
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    if kind == "sum":
        return np.sum(t, axis=axis)
    if kind == "mean":
        return np.mean(t, axis=axis)
    if kind == "argmax":
        return np.argmax(t, axis=axis)
    raise ValueError(f"unknown reduction {kind!r}")
