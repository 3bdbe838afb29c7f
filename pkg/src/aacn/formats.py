"""On-disk formats: tensor files, parameter checkpoints and PGM images.

Tensor file layout (all integers little-endian u32)::

    b"AACN" | version | rank | dims[rank] | payload f32 LE, row-major

Checkpoint layout::

    b"AACW" | version | count | count x (name_len | name utf-8 | rank | dims | f32 payload)
"""
from __future__ import annotations

import struct
from typing import Dict, Mapping

import numpy as np

TENSOR_MAGIC = b"AACN"
CHECKPOINT_MAGIC = b"AACW"
FORMAT_VERSION = 1

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    code = 10


class BadMagicError(FormatError):
    code = 11


class VersionError(FormatError):
    code = 12


class TruncatedError(FormatError):
    code = 13


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.path}: truncated at byte {self.pos}, needed {n} more")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def header(self, magic: bytes) -> None:
        got = self.take(4) if len(self.buf) >= 4 else self.buf
        if got != magic:
            raise BadMagicError(f"{self.path}: bad magic {got!r}, expected {magic!r}")
        version = self.u32()
        if version != FORMAT_VERSION:
            raise VersionError(f"{self.path}: unsupported version {version}")

    def array(self) -> np.ndarray:
        rank = self.u32()
        dims = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64))
        payload = self.take(4 * count)
        return np.frombuffer(payload, dtype=_F32).reshape(dims).astype(np.float32)


def _array_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_F32).tobytes()


def encode_tensor(arr) -> bytes:
    return TENSOR_MAGIC + struct.pack("<I", FORMAT_VERSION) + _array_bytes(arr)


def decode_tensor(buf: bytes, path="<bytes>") -> np.ndarray:
    r = _Reader(buf, path)
    r.header(TENSOR_MAGIC)
    arr = r.array()
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes after payload")
    return arr


def write_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), path)


def write_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + _array_bytes(arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    r.header(CHECKPOINT_MAGIC)
    count = r.u32()
    out = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        out[name] = r.array()
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes after last parameter")
    return out


def write_pgm(path, m: np.ndarray) -> None:
    """8-bit binary PGM of a map with values in [0, 1] (values x 255, rounded)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("PGM export needs a 2-D map")
    pix = np.rint(np.clip(m, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
