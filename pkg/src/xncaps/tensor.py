"""Dense tensor helpers.

Tensors are plain row-major numpy arrays. Public results are float32 unless the
caller passes float64, in which case float64 is preserved (the gradient code
relies on that). Contractions and norms always accumulate in float64.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a float32/float64 ndarray, rejecting empty axes."""
    arr = np.asarray(x)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"every axis must have length >= 1, got {arr.shape}")
    return arr


def _out_dtype(*arrays: np.ndarray):
    return np.float64 if any(a.dtype == np.float64 for a in arrays) else np.float32


def _check_axis(x: np.ndarray, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def broadcast_leading(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Broadcast two leading-axis shapes; only axes of length 1 stretch."""
    n = max(len(a), len(b))
    a = (1,) * (n - len(a)) + tuple(a)
    b = (1,) * (n - len(b)) + tuple(b)
    out = []
    for x, y in zip(a, b):
        if x != y and 1 not in (x, y):
            raise ShapeError(f"leading axes {a} and {b} do not broadcast")
        out.append(max(x, y))
    return tuple(out)


def matmul_last2(a, b) -> np.ndarray:
    """Contract ``a[..., m, k]`` with ``b[..., k, n]`` over ``k``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot contract shapes {a.shape} and {b.shape}")
    try:
        broadcast_leading(a.shape[:-2], b.shape[:-2])
    except ShapeError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(_out_dtype(a, b))


def softmax_axis(x, axis: int) -> np.ndarray:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=axis, keepdims=True))
    return (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)


def l2norm_last(x) -> np.ndarray:
    x = as_tensor(x)
    x64 = x.astype(np.float64)
    return np.sqrt(np.sum(x64 * x64, axis=-1, keepdims=True)).astype(x.dtype)


def mean_abs_axis(x, axis: int) -> np.ndarray:
    """Mean magnitude along ``axis`` (L1 norm divided by the axis length)."""
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    total = np.sum(np.abs(x.astype(np.float64)), axis=axis, keepdims=True)
    return (total / x.shape[axis]).astype(x.dtype)
