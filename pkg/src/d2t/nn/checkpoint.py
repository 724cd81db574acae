"""Versioned named-tensor container.

Layout (all integers little-endian)::

    magic   8 bytes  b"D2TSTORE"
    version u32
    count   u64
    per tensor:
        name_len u32, name (UTF-8)
        rank     u32
        dims     rank x u64
        dtype    u8   (see DTYPE_TAGS)
        values   raw little-endian, C order

Round-trips are bit-exact. Tensors are written in insertion order so that equal
contents give equal bytes.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from os import PathLike
from typing import Any, Union

import numpy as np
import torch

MAGIC = b"D2TSTORE"
VERSION = 1
DTYPE_TAGS = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("<u1"),
    5: np.dtype("<c16"),
}
_TAG_OF = {dt: tag for tag, dt in DTYPE_TAGS.items()}
META_KEY = "__meta__"


class CheckpointFormatError(ValueError):
    pass


ArrayLike = Union[np.ndarray, torch.Tensor]


def _as_array(value: ArrayLike) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    dt = np.dtype(dt.str.replace("=", "<").replace("|", "<"))
    if dt not in _TAG_OF:
        raise CheckpointFormatError(f"unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr, dtype=dt)


class NamedTensorStore(OrderedDict):
    """Ordered mapping name -> numpy array with a binary (de)serialiser.

    A JSON-serialisable ``meta`` dict travels alongside as a uint8 tensor.
    """

    def __init__(self, *args, meta: dict[str, Any] | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.meta: dict[str, Any] = dict(meta or {})

    def __setitem__(self, key: str, value: ArrayLike) -> None:
        super().__setitem__(key, _as_array(value))

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "", meta=None) -> "NamedTensorStore":
        store = cls(meta=meta)
        for name, t in module.state_dict().items():
            store[prefix + name] = t
        return store

    def load_into(self, module: torch.nn.Module, prefix: str = "") -> None:
        own = module.state_dict()
        state = {}
        for name, t in own.items():
            key = prefix + name
            if key not in self:
                raise KeyError(f"checkpoint is missing {key}")
            state[name] = torch.from_numpy(self[key].copy()).to(t.dtype)
        module.load_state_dict(state)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        items = list(self.items())
        if self.meta:
            blob = json.dumps(self.meta, sort_keys=True).encode("utf-8")
            items.append((META_KEY, np.frombuffer(blob, dtype="<u1")))
        buf.write(MAGIC)
        buf.write(struct.pack("<IQ", VERSION, len(items)))
        for name, arr in items:
            raw_name = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw_name)))
            buf.write(raw_name)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(struct.pack("<B", _TAG_OF[arr.dtype]))
            buf.write(arr.tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "NamedTensorStore":
        view = memoryview(data)
        if bytes(view[:8]) != MAGIC:
            raise CheckpointFormatError("bad magic; not a named-tensor store")
        version, count = struct.unpack_from("<IQ", view, 8)
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported store version {version}")
        off = 8 + 12
        store = cls()
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off : off + n]).decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", view, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", view, off)
            off += 8 * rank
            (tag,) = struct.unpack_from("<B", view, off)
            off += 1
            if tag not in DTYPE_TAGS:
                raise CheckpointFormatError(f"unknown dtype tag {tag} for {name}")
            dt = DTYPE_TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(view[off : off + nbytes], dtype=dt).reshape(dims).copy()
            off += nbytes
            if name == META_KEY:
                store.meta = json.loads(arr.tobytes().decode("utf-8"))
            else:
                OrderedDict.__setitem__(store, name, arr)
        if off != len(data):
            raise CheckpointFormatError("trailing bytes after last tensor")
        return store

    def save(self, path: str | PathLike) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | PathLike) -> "NamedTensorStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
