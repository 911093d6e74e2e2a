"""Parameter containers and binary checkpoint helpers shared by the models."""

from __future__ import annotations

import json
import math
import struct
from typing import BinaryIO

import numpy as np

from .autodiff import Tensor


class ParamSet:
    """Ordered named parameters; declaration order is the serialization order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self._params.values()]

    def set_arrays(self, arrays) -> None:
        for p, a in zip(self._params.values(), arrays):
            if p.data.shape != a.shape:
                raise ValueError(f"shape mismatch {p.data.shape} vs {a.shape}")
            p.data = np.array(a, dtype=np.float64)

    def count(self) -> int:
        return sum(p.data.size for p in self)

    def freeze(self) -> None:
        for p in self:
            p.requires_grad = False


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def sinusoidal_table(n: int, dim: int) -> np.ndarray:
    """Fixed sin/cos encoding, one row per position."""
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / dim))
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)[:, : dim - dim // 2]
    return table


# ------------------------------------------------------------- checkpoints


def write_checkpoint(fh: BinaryIO, magic: bytes, config: dict, params: ParamSet, version: int = 1) -> None:
    """magic, u16 version, u32 config length, config JSON, then each tensor.

    Each tensor: u16 name length, name, u8 ndim, u32 dims, little-endian f64 data.
    """
    blob = json.dumps(config, sort_keys=True).encode()
    fh.write(magic + struct.pack("<HI", version, len(blob)) + blob)
    fh.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        nb = name.encode()
        fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.data.ndim))
        fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    pass


def read_checkpoint(raw: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:4] != magic:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {magic!r}")
    try:
        version, n = struct.unpack_from("<HI", raw, 4)
        off = 10
        config = json.loads(raw[off:off + n].decode())
        off += n
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if shape else 1
            if off + 8 * size > len(raw):
                raise CheckpointError(f"truncated tensor {name!r} at byte {off}")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint: {err}") from err
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes")
    return config, arrays
