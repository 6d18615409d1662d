"""Dense rank-4 (N, C, H, W) float64 tensors backed by numpy.

A tensor here is just a read-only ``np.ndarray`` with ``ndim == 4`` and
dtype float64.  The helpers below validate that shape discipline and
provide the handful of reductions the normalization and head code needs.
"""
from __future__ import annotations

import json
import struct
import zipfile
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

AXES = "NCHW"


class TensorError(ValueError):
    pass


def tensor4(data, shape=None) -> np.ndarray:
    """Build a frozen float64 rank-4 array, optionally reshaping flat data."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if len(shape) != 4 or any(s < 0 for s in shape):
            raise TensorError(f"invalid shape {shape}")
        if arr.size != int(np.prod(shape)):
            raise TensorError(f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim != 4:
        raise TensorError(f"expected rank-4 data, got ndim={arr.ndim}")
    arr.setflags(write=False)
    return arr


def _axis_indices(axes: Iterable) -> tuple[int, ...]:
    out = set()
    for a in axes:
        if isinstance(a, str):
            a = a.upper()
            if a not in AXES:
                raise TensorError(f"unknown axis {a!r}")
            out.add(AXES.index(a))
        else:
            if not 0 <= int(a) < 4:
                raise TensorError(f"unknown axis {a!r}")
            out.add(int(a))
    return tuple(sorted(out))


def reduce_stats(x: np.ndarray, axes) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance over ``axes``, kept as extent-1 dims.

    ``axes`` is any iterable of axis letters ("NHW") or indices.
    """
    x = np.asarray(x, dtype=np.float64)
    idx = _axis_indices(axes)
    if any(x.shape[i] == 0 for i in idx):
        raise TensorError("empty reduction")
    if not idx:
        return x.copy(), np.zeros_like(x)
    mean = x.mean(axis=idx, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=idx, keepdims=True)
    return mean, var


def map_elementwise(x: np.ndarray, f: Callable[[float], float]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    try:
        out = np.asarray(f(x), dtype=np.float64)
        if out.shape != x.shape:
            raise TypeError
    except (TypeError, ValueError):
        # scalar-only callables
        out = np.vectorize(f, otypes=[np.float64])(x)
    return tensor4(out)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if len(a) != len(b):
        raise TensorError("broadcast mismatch")
    out = []
    for p, q in zip(a, b):
        if p == q or q == 1:
            out.append(p)
        elif p == 1:
            out.append(q)
        else:
            raise TensorError("broadcast mismatch")
    return tuple(out)


_OPS = {
    "add": np.add,
    "subtract": np.subtract,
    "multiply": np.multiply,
    "divide": np.divide,
    "maximum": np.maximum,
    "minimum": np.minimum,
}


def combine(x: np.ndarray, y: np.ndarray, op="add") -> np.ndarray:
    """Elementwise binary op; only extent-1 axes stretch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _broadcast_shape(x.shape, y.shape)
    fn = _OPS[op] if isinstance(op, str) else op
    return tensor4(fn(x, y))


def seeded_fill(shape, seed: int, distribution=("normal", 0.0, 1.0)) -> np.ndarray:
    """Deterministic fill from numpy's PCG64 generator.

    ``distribution`` is ``("uniform", a, b)`` or ``("normal", mu, sigma)``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 0 for s in shape):
        raise TensorError(f"invalid shape {shape}")
    kind, p, q = distribution
    rng = np.random.Generator(np.random.PCG64(seed))
    if kind == "uniform":
        data = rng.uniform(p, q, size=shape)
    elif kind == "normal":
        data = rng.normal(p, q, size=shape)
    else:
        raise TensorError(f"unknown distribution {kind!r}")
    return tensor4(data)


# Golden files: four little-endian uint64 extents, then float64 data in
# row-major (n, c, h, w) order.

def to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise TensorError(f"expected rank-4 data, got ndim={x.ndim}")
    header = struct.pack("<4Q", *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f8").tobytes()


def from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 32:
        raise TensorError("truncated tensor header")
    shape = struct.unpack("<4Q", blob[:32])
    n = int(np.prod(shape))
    if len(blob) != 32 + 8 * n:
        raise TensorError(f"payload size {len(blob) - 32} does not match shape {shape}")
    data = np.frombuffer(blob, dtype="<f8", offset=32, count=n)
    return tensor4(data.astype(np.float64), shape)


def save_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def save_checkpoint(path, params: dict) -> None:
    """Write named arrays as golden-file blobs inside a zip archive.

    Arrays of rank < 4 are left-padded with unit extents; the original
    shapes go into ``shapes.json`` so loading restores them.
    """
    shapes = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(params):
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.ndim > 4:
                raise TensorError(f"{name}: rank {arr.ndim} > 4")
            shapes[name] = list(arr.shape)
            padded = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
            info = zipfile.ZipInfo(f"{name}.bin", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, to_bytes(padded))
        info = zipfile.ZipInfo("shapes.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(shapes, sort_keys=True))


def load_checkpoint(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        shapes = json.loads(zf.read("shapes.json"))
        return {
            name: np.array(from_bytes(zf.read(f"{name}.bin"))).reshape(shape)
            for name, shape in shapes.items()
        }
