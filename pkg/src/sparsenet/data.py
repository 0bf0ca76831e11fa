"""Dataset ingestion: IDX files and a synthetic labelled-shapes generator.

Images are returned as float64 ``(n, h, w, c)`` arrays scaled to [0, 1] and
labels as int64 vectors.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import stream

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class DataError(ValueError):
    pass


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) into an array of its native dtype."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise DataError(f"{path}: unknown IDX type code 0x{code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[code])
    count = int(np.prod(dims)) if dims else 1
    body = raw[4 + 4 * ndim :]
    if len(body) != count * dtype.itemsize:
        raise DataError(f"{path}: expected {count * dtype.itemsize} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def write_idx(path, array):
    """Write an unsigned-byte IDX file."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError("only uint8 arrays are written")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx_dataset(images_path, labels_path):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.dtype != np.uint8 or labels.dtype != np.uint8:
        raise DataError("IDX image and label files must be unsigned-byte")
    X = images.astype(np.float64) / 255.0
    if X.ndim == 3:
        X = X[..., None]
    return X, labels.astype(np.int64)


# --- synthetic shapes --------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "cross", "hbar", "vbar", "diagonal", "ring", "xmark", "corner")


def _shape_mask(kind, yy, xx, size, thick):
    """Boolean raster of one shape centered at the origin of ``(yy, xx)``."""
    r = size / 2.0
    ay, ax = np.abs(yy), np.abs(xx)
    if kind == "disk":
        return yy**2 + xx**2 <= r**2
    if kind == "square":
        return (ay <= r * 0.85) & (ax <= r * 0.85)
    if kind == "triangle":
        return (yy <= r * 0.8) & (yy >= -r * 0.9) & (ax <= (yy + r * 0.9) * 0.6)
    if kind == "cross":
        return ((ay <= thick) & (ax <= r)) | ((ax <= thick) & (ay <= r))
    if kind == "hbar":
        return (ay <= thick * 1.2) & (ax <= r)
    if kind == "vbar":
        return (ax <= thick * 1.2) & (ay <= r)
    if kind == "diagonal":
        return (np.abs(yy - xx) <= thick * 1.4) & (ay <= r) & (ax <= r)
    if kind == "ring":
        d = np.sqrt(yy**2 + xx**2)
        return (d <= r) & (d >= r - thick * 1.6)
    if kind == "xmark":
        return ((np.abs(yy - xx) <= thick) | (np.abs(yy + xx) <= thick)) & (ay <= r) & (ax <= r)
    if kind == "corner":
        return ((ay <= thick) & (xx >= -thick) & (xx <= r)) | ((ax <= thick) & (yy >= -thick) & (yy <= r))
    raise DataError(f"unknown shape {kind!r}")


def synthetic_shapes(n: int, image_hw=(24, 20), channels: int = 1, classes: int = 10, seed: int = 0,
                     noise: float = 0.25, clutter: int = 2):
    """Labelled geometric shapes with random pose, scale, stroke, clutter and pixel noise.

    Each class is one shape kind; per-sample rotation, scaling, translation and
    stroke width vary within class. ``clutter`` small random blobs and
    Gaussian pixel noise of std ``noise`` make the task non-trivial.
    """
    if classes > len(SHAPES):
        raise DataError(f"at most {len(SHAPES)} classes")
    rng = stream(seed, "synthetic_shapes")
    h, w = image_hw
    labels = rng.integers(0, classes, size=n)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    X = np.empty((n, h, w, channels))
    base = min(h, w)
    for i in range(n):
        angle = rng.uniform(-0.6, 0.6)
        size = base * rng.uniform(0.45, 0.8)
        thick = rng.uniform(0.8, 1.8)
        cy = h / 2 + rng.uniform(-0.18, 0.18) * h
        cx = w / 2 + rng.uniform(-0.18, 0.18) * w
        ca, sa = np.cos(angle), np.sin(angle)
        dy, dx = ys - cy, xs - cx
        yy, xx = ca * dy - sa * dx, sa * dy + ca * dx
        img = _shape_mask(SHAPES[labels[i]], yy, xx, size, thick).astype(np.float64)
        img *= rng.uniform(0.6, 1.0)
        for _ in range(rng.integers(0, clutter + 1)):
            by, bx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(0.8, 2.0)
            img = np.maximum(img, ((ys - by) ** 2 + (xs - bx) ** 2 <= rad**2) * rng.uniform(0.3, 0.9))
        for c in range(channels):
            gain = 1.0 if channels == 1 else rng.uniform(0.5, 1.0)
            X[i, :, :, c] = img * gain
    X += rng.normal(0.0, noise, size=X.shape)
    np.clip(X, 0.0, 1.0, out=X)
    return X, labels.astype(np.int64)


@dataclass
class Dataset:
    """Train/test arrays plus a held-out slice of training data for statistics."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    X_stats: np.ndarray
    y_stats: np.ndarray

    @classmethod
    def split(cls, X, y, test_fraction=0.2, stats_fraction=0.1, stats_min=256, seed=0) -> "Dataset":
        """Shuffle, cut a test split, then hold out a stats slice from the training part.

        The stats slice is ``max(stats_min, stats_fraction * n_train)`` samples,
        never more than half the training part.
        """
        if len(X) != len(y):
            raise DataError(f"{len(X)} images but {len(y)} labels")
        perm = stream(seed, "split").permutation(len(X))
        X, y = X[perm], y[perm]
        n_test = int(round(test_fraction * len(X)))
        X_test, y_test = X[:n_test], y[:n_test]
        X_rest, y_rest = X[n_test:], y[n_test:]
        n_stats = min(max(stats_min, int(round(stats_fraction * len(X_rest)))), len(X_rest) // 2)
        return cls(X_rest[n_stats:], y_rest[n_stats:], X_test, y_test, X_rest[:n_stats], y_rest[:n_stats])
