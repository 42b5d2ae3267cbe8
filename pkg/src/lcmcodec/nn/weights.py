"""Named-tensor weight container and its binary file format.

Layout (little endian): b"LCMW", version u16, tensor count u32, then per tensor
name_len u16, UTF-8 name, rank u8, dims u32 x rank, f32 payload (row-major);
a CRC-32 of all preceding bytes closes the file.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"LCMW"
VERSION = 1
META_CONFIG = "meta.config"


class WeightFileError(ValueError):
    pass


class WeightStore(OrderedDict):
    """Ordered name -> float32 array map; ``metadata`` holds the architecture config."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] | Mapping = (), metadata=None):
        super().__init__()
        pairs = items.items() if isinstance(items, Mapping) else items
        for name, arr in pairs:
            if name in self:
                raise ValueError(f"duplicate tensor name '{name}'")
            self[name] = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
        self.metadata = dict(metadata or {})

    @property
    def architecture_id(self) -> int:
        return architecture_id({k: v.shape for k, v in self.items()}, self.metadata)


def architecture_id(shapes: Mapping[str, tuple], config: Mapping | None = None) -> int:
    text = "\n".join(f"{k}:{'x'.join(str(int(d)) for d in shapes[k])}" for k in sorted(shapes))
    text += "\n" + json.dumps(config or {}, sort_keys=True)
    return zlib.crc32(text.encode())


def _entries(store) -> list[tuple[str, np.ndarray]]:
    if isinstance(store, Mapping):
        pairs = list(store.items())
        metadata = getattr(store, "metadata", {})
    else:
        pairs = list(store)
        metadata = {}
    names = [n for n, _ in pairs]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise ValueError(f"duplicate tensor name '{dup}'")
    if metadata:
        if META_CONFIG in names:
            raise ValueError(f"reserved tensor name '{META_CONFIG}'")
        blob = np.frombuffer(json.dumps(metadata, sort_keys=True).encode(), dtype=np.uint8)
        pairs.append((META_CONFIG, blob.astype(np.float32)))
    return pairs


def dumps_weights(store) -> bytes:
    out = bytearray(MAGIC)
    pairs = _entries(store)
    out += struct.pack("<HI", VERSION, len(pairs))
    for name, arr in pairs:
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim > 3:
            raise ValueError(f"tensor '{name}' has rank {arr.ndim} > 3")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def loads_weights(data: bytes, expected: Mapping[str, tuple] | None = None) -> WeightStore:
    if len(data) < 14 or data[:4] != MAGIC:
        raise WeightFileError("bad magic: not a weight file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise WeightFileError("checksum mismatch (truncated or corrupt weight file)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    pos = 10
    items = []
    metadata = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + nlen].decode("utf-8")
        pos += 2 + nlen
        rank = data[pos]
        dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
        pos += 1 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
        if name == META_CONFIG:
            metadata = json.loads(arr.astype(np.uint8).tobytes().decode())
        else:
            items.append((name, arr))
    if pos != len(data) - 4:
        raise WeightFileError("trailing bytes after last tensor")
    store = WeightStore(items, metadata)
    if expected is not None:
        check_shapes(store, expected)
    return store


def check_shapes(store: Mapping[str, np.ndarray], expected: Mapping[str, tuple]):
    for name, shape in expected.items():
        if name not in store:
            raise WeightFileError(f"missing tensor '{name}'")
        if tuple(store[name].shape) != tuple(shape):
            raise WeightFileError(
                f"shape mismatch for '{name}': file {tuple(store[name].shape)}, architecture {tuple(shape)}"
            )


def save_weights(store, path):
    with open(path, "wb") as f:
        f.write(dumps_weights(store))


def load_weights(path, expected: Mapping[str, tuple] | None = None) -> WeightStore:
    with open(path, "rb") as f:
        return loads_weights(f.read(), expected)
