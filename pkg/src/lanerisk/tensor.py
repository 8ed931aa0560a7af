"""Dense float64 tensors, checked primitive ops, and the raw ``TNSR`` file format.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
The helpers here add the shape discipline the layers rely on: no implicit
broadcasting, explicit dimension errors, and pure (non-mutating) results.

Raw tensor layout::

    b"TNSR" | version u8 (=1) | dtype u8 (1=f32, 2=f64) | rank u8 |
    rank x u32 little-endian extents | row-major little-endian data
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DimensionError, FormatError

MAGIC = b"TNSR"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBBB")


def as_tensor(data, shape=None) -> np.ndarray:
    """Return ``data`` as a float64 tensor, validating rank and extents."""
    arr = np.array(data, dtype=np.float64, copy=True)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape)):
            raise DimensionError(
                f"data length {arr.size} does not match shape {shape}"
            )
        arr = arr.reshape(shape)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(s < 1 for s in arr.shape):
        raise DimensionError(f"every extent must be >= 1, got {arr.shape}")
    return np.ascontiguousarray(arr)


def zeros(*shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product with an explicit inner-extent check."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul needs rank-2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    return a @ b


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "hadamard": np.multiply,
}


def elementwise(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ, {a.shape} vs {b.shape}")
    return fn(a, b)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "relu": relu,
    "linear": lambda x: np.array(x, dtype=np.float64, copy=True),
}


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def activation_grad(kind: str, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Derivative of ``activation(kind, x)`` given its output ``y``."""
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "linear":
        return np.ones_like(y)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


# -- raw tensor files -------------------------------------------------------


def encode_tensor(arr: np.ndarray, dtype_code: int = 2) -> bytes:
    if dtype_code not in DTYPE_CODES:
        raise ValueError(f"unsupported dtype code {dtype_code}")
    arr = np.asarray(arr)
    if arr.ndim < 1 or arr.ndim > 255:
        raise DimensionError(f"cannot encode rank-{arr.ndim} tensor")
    head = _HEADER.pack(MAGIC, VERSION, dtype_code, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = np.ascontiguousarray(arr, dtype=DTYPE_CODES[dtype_code]).tobytes()
    return head + extents + body


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated tensor header", offset)
    magic, version, code, rank = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset + 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset + 5)
    if rank < 1:
        raise FormatError("rank must be >= 1", offset + 6)
    pos = offset + _HEADER.size
    if len(buf) - pos < 4 * rank:
        raise FormatError("truncated extents", pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    if any(s < 1 for s in shape):
        raise FormatError(f"zero extent in shape {shape}", pos)
    pos += 4 * rank
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(
            f"truncated data: need {nbytes} bytes, have {len(buf) - pos}", pos
        )
    data = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=pos)
    arr = data.astype(np.float64).reshape(shape)
    return arr, pos + nbytes


def save_tensor(path, arr: np.ndarray, dtype_code: int = 2) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr, dtype_code))


def load_tensor(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor", end)
    return arr
