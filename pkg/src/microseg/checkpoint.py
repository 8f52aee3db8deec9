"""Bit-exact binary container for named tensors.

Layout (all integers little-endian):

    bytes 0..3   magic "MSEG"
    u32          format version (currently 1)
    u32          tensor count
    per tensor:
        u16      name length in bytes
        bytes    UTF-8 name
        u8       dtype code: 0 = float32, 1 = float64
        u8       ndim
        ndim*u64 dimension sizes
        raw      values, little-endian, row-major

Tensors keep their insertion order, so save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedError",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"MSEG"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class BadMagicError(CheckpointError):
    """File does not start with the MSEG magic."""


class UnsupportedVersionError(CheckpointError):
    """File declares a format version this reader does not understand."""


class TruncatedError(CheckpointError):
    """File ends before the declared contents."""


def save_checkpoint(tensors, path):
    """Write a name -> array/Tensor mapping; only f32/f64 tensors allowed."""
    blobs = []
    for name, value in tensors.items():
        # asarray, not ascontiguousarray: the latter promotes 0-d to (1,)
        arr = np.asarray(getattr(value, "data", value))
        code = _CODES_BY_KIND.get(arr.dtype)
        if code is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        header = struct.pack("<H", len(encoded)) + encoded
        header += struct.pack("<BB", code, arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        blobs.append(header + payload)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blobs)))
        for blob in blobs:
            fh.write(blob)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def read(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"file ends inside {what}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path):
    """Read a checkpoint into an ordered name -> numpy array mapping."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    magic = r.read(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, found {magic!r}")
    version, count = struct.unpack("<II", r.read(8, "header"))
    if version != VERSION:
        raise UnsupportedVersionError(
            f"format version {version}; this reader supports {VERSION}"
        )
    tensors = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", r.read(2, f"tensor {i} name length"))
        name = r.read(name_len, f"tensor {i} name").decode("utf-8")
        code, ndim = struct.unpack("<BB", r.read(2, f"{name} dtype/ndim"))
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}Q", r.read(8 * ndim, f"{name} shape"))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = r.read(nbytes, f"{name} values")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    return tensors
