"""Named parameter collections and the ``TNSR`` checkpoint format.

Layout (all integers little-endian)::

    b"TNSR" | version u32 | count u32
    per entry: name_len u32 | name utf-8 | dtype u8 | rank u8 | dims u32 * rank | payload
"""

from __future__ import annotations

import hashlib
import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .tensor import Tensor

__all__ = ["ParamSet", "CheckpointError", "save_params", "load_params", "TNSR_VERSION"]

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<u4"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


class ParamSet:
    """Ordered mapping from dotted parameter path to :class:`Tensor`.

    Entries with ``requires_grad=False`` are buffers (e.g. batch-norm running
    statistics): they are saved and checksummed but not optimized.
    """

    def __init__(self, items=None):
        self._items: OrderedDict[str, Tensor] = OrderedDict()
        if items:
            for name, value in (items.items() if hasattr(items, "items") else items):
                self[name] = value

    def __setitem__(self, name: str, value) -> None:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(value, Tensor):
            value = Tensor(np.asarray(value))
        self._items[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def keys(self):
        return self._items.keys()

    def items(self):
        return self._items.items()

    def values(self):
        return self._items.values()

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        arr = np.ascontiguousarray(data)
        if trainable and arr.dtype.kind != "f":
            raise TypeError(f"trainable parameter {name!r} must be floating point")
        t = _raw_tensor(arr, trainable)
        self[name] = t
        return t

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self._items.items() if v.requires_grad)

    def buffers(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self._items.items() if not v.requires_grad)

    def subset(self, prefix: str) -> "ParamSet":
        """Entries under ``prefix.`` with the prefix stripped (tensors shared, not copied)."""
        out = ParamSet()
        p = prefix + "."
        for k, v in self._items.items():
            if k.startswith(p):
                out._items[k[len(p):]] = v
        return out

    def zero_grad(self) -> None:
        for v in self._items.values():
            v.grad = None

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self._items.items():
            out._items[k] = _raw_tensor(v.data.copy(), v.requires_grad)
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for k, v in self._items.items():
            data = v.data.astype(dtype) if v.data.dtype.kind == "f" else v.data.copy()
            out._items[k] = _raw_tensor(data, v.requires_grad)
        return out

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._items.items()}

    def num_parameters(self, trainable_only: bool = True) -> int:
        src = self.trainable() if trainable_only else self._items
        return int(sum(v.size for v in src.values()))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_params(self, buf)
        return buf.getvalue()

    def checksum(self) -> bytes:
        """SHA-256 of the serialized form (32 bytes)."""
        return hashlib.sha256(self.to_bytes()).digest()

    def equal(self, other: "ParamSet") -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a.data, b.data)
            for a, b in zip(self.values(), other.values())
        )


def write_params(params: ParamSet, fh: BinaryIO) -> None:
    fh.write(TNSR_MAGIC)
    fh.write(struct.pack("<II", TNSR_VERSION, len(params)))
    for name, t in params.items():
        arr = np.asarray(t.data)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    # trainable flags are not part of the wire format; buffers are recognised by name


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return b


def read_params(fh: BinaryIO, buffer_names=None) -> ParamSet:
    if _read_exact(fh, 4, "magic") != TNSR_MAGIC:
        raise CheckpointError("bad magic, not a TNSR checkpoint")
    version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != TNSR_VERSION:
        raise CheckpointError(f"unsupported TNSR version {version}")
    out = ParamSet()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
        name = _read_exact(fh, nlen, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", _read_exact(fh, 2, f"dtype/rank of {name}"))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}"))
        dt = _CODE_DTYPES[code]
        n = int(np.prod(dims)) * dt.itemsize
        arr = np.frombuffer(_read_exact(fh, n, f"payload of {name}"), dtype=dt).reshape(dims).copy()
        trainable = arr.dtype.kind == "f" and not _is_buffer(name, buffer_names)
        out._items[name] = _raw_tensor(arr, trainable)
    return out


def _raw_tensor(arr: np.ndarray, trainable: bool) -> Tensor:
    """Tensor holding ``arr`` as is; integer buffers keep their dtype."""
    t = Tensor(arr if arr.dtype.kind == "f" else np.zeros(0), requires_grad=trainable)
    t.data = arr
    return t


def _is_buffer(name: str, buffer_names) -> bool:
    if buffer_names is not None:
        return name in buffer_names
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("running_mean", "running_var") or name.startswith("__")


def save_params(params: ParamSet, path) -> None:
    Path(path).write_bytes(params.to_bytes())


def load_params(path, buffer_names=None) -> ParamSet:
    with open(path, "rb") as fh:
        return read_params(fh, buffer_names)
