"""Elementwise and reduction primitives on dense float arrays.

Arrays are plain ``numpy.ndarray`` objects; this module only adds the checks
and conventions the rest of the package relies on (population moments,
float64 accumulation, explicit shape errors).
"""
from typing import NamedTuple

import numpy as np


class ShapeError(ValueError):
    """Raised when two arrays that must agree in shape do not."""


class Moments(NamedTuple):
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray


def as_tensor(data, shape=None) -> np.ndarray:
    """Return a float64 array, optionally reshaped, with all extents >= 1."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if any(s < 1 for s in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    return arr


def elementwise_mul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.multiply(a, b)


def reduce_moments(x, axis: int = 0) -> Moments:
    """Population mean and standard deviation along ``axis``.

    Divides by n, not n - 1. An extent of 1 along ``axis`` yields std 0 with
    the degenerate flag set; so does any slice whose values are all equal.
    """
    x = np.asarray(x, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for rank {x.ndim}")
    n = x.shape[axis]
    mean = x.sum(axis=axis) / n
    centered = x - np.expand_dims(mean, axis)
    var = (centered * centered).sum(axis=axis) / n
    constant = x.max(axis=axis) == x.min(axis=axis)
    std = np.where(constant, 0.0, np.sqrt(var))
    return Moments(mean, std, constant)
