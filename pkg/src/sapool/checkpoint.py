"""Little-endian binary checkpoints.

Layout::

    b"SAPL"              magic
    u32                  version (1)
    u32                  number of tensor records
    per tensor record:
        u32              name length in bytes
        bytes            UTF-8 name
        u32              rank
        u64 * rank       extents
        f32 * prod       row-major payload
    u32                  number of mask records
    per mask record:
        u32              name length in bytes
        bytes            UTF-8 name (the masked weight's parameter name)
        u64              channel count N
        ceil(N/8) bytes  bitmap, channel c at bit (c % 8) of byte c // 8; 1 = active
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SAPL"
VERSION = 1


def encode(tensors: dict[str, np.ndarray], masks: dict[str, np.ndarray] | None = None) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    masks = masks or {}
    out.append(struct.pack("<I", len(masks)))
    for name, m in masks.items():
        m = np.asarray(m, dtype=bool)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<Q", m.size))
        out.append(np.packbits(m, bitorder="little").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=len(self.raw))
        b = self.raw[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(raw: bytes) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (count,) = r.unpack("<I", "record count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<I", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("checkpoint record name is not UTF-8", offset=start + 4) from None
        (rank,) = r.unpack("<I", "rank")
        shape = r.unpack(f"<{rank}Q", "extents")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n, f"payload of {name}"), dtype="<f4").reshape(shape).copy()
    masks: dict[str, np.ndarray] = {}
    if r.pos < len(raw):
        (mcount,) = r.unpack("<I", "mask count")
        for _ in range(mcount):
            (nlen,) = r.unpack("<I", "mask name length")
            name = r.take(nlen, "mask name").decode("utf-8")
            (n,) = r.unpack("<Q", "mask size")
            bits = np.frombuffer(r.take((n + 7) // 8, f"mask bitmap of {name}"), dtype=np.uint8)
            masks[name] = np.unpackbits(bits, count=n, bitorder="little").astype(bool)
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes in checkpoint", offset=r.pos)
    return tensors, masks


def save_checkpoint(path, tensors: dict[str, np.ndarray], masks: dict[str, np.ndarray] | None = None) -> None:
    Path(path).write_bytes(encode(tensors, masks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
