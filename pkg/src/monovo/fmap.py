"""FMAP: a minimal container for dense float32 tensors.

Layout (all little-endian)::

    bytes 0-3    magic b"FMAP"
    bytes 4-19   uint32 version (=1), H, W, C
    bytes 20-    H*W*C float32 values, row-major, channel-last
"""

import struct

import numpy as np

MAGIC = b"FMAP"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FmapError(ValueError):
    pass


def to_bytes(array):
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise FmapError(f"FMAP stores 2-D or 3-D arrays, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FmapError("FMAP values must be finite")
    H, W, C = a.shape
    return _HEADER.pack(MAGIC, VERSION, H, W, C) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def from_bytes(buf):
    if len(buf) < _HEADER.size:
        raise FmapError("truncated FMAP header")
    magic, version, H, W, C = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FmapError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FmapError(f"unsupported FMAP version {version}")
    n = H * W * C
    if len(buf) != _HEADER.size + 4 * n:
        raise FmapError(f"expected {n} values, file holds {(len(buf) - _HEADER.size) / 4:g}")
    a = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).reshape(H, W, C)
    if not np.all(np.isfinite(a)):
        raise FmapError("FMAP contains non-finite values")
    return a.astype(np.float32)


def write_fmap(path, array):
    with open(path, "wb") as f:
        f.write(to_bytes(array))


def read_fmap(path):
    """Read an FMAP file as an ``(H, W, C)`` float32 array."""
    with open(path, "rb") as f:
        return from_bytes(f.read())
