"""Flat binary parameter container.

Layout (all integers little-endian, documented byte-exactly in README.md):

    bytes 0..7   magic b"RFPCKPT1"
    u32          length of the resolved config text, then that many UTF-8 bytes
    u32          length of the architecture hash string, then ASCII hex bytes
    u32          number of entries
    per entry:
    u32          name length, then UTF-8 name (hierarchical path)
        u8           rank
        rank x u32   dims
        u8           dtype code (8 = float64, 4 = float32)
        raw values, little-endian, C order

Momentum buffers ride along under an ``opt/`` name prefix so training can
resume; loaders that only want model weights skip them.
"""

from __future__ import annotations

import struct
from typing import Dict, Tuple

import numpy as np

from .errors import DataError

MAGIC = b"RFPCKPT1"
_DTYPE_CODES = {8: "<f8", 4: "<f4"}


def save_checkpoint(path, arrays: Dict[str, np.ndarray], config_text: str, arch_hash: str) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        cfg = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        hsh = arch_hash.encode("ascii")
        fh.write(struct.pack("<I", len(hsh)))
        fh.write(hsh)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nm = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            code = arr.dtype.itemsize
            if code not in _DTYPE_CODES:
                raise DataError(f"cannot store dtype {arr.dtype}")
            fh.write(struct.pack("<B", code))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def load_checkpoint(path) -> Tuple[str, str, Dict[str, np.ndarray]]:
    """Returns (config_text, arch_hash, name -> array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    off = 8

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"{path}: truncated checkpoint")
        piece = blob[off:off + n]
        off += n
        return piece

    def u32():
        return struct.unpack("<I", take(4))[0]

    config_text = take(u32()).decode("utf-8")
    arch_hash = take(u32()).decode("ascii")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        rank = take(1)[0]
        shape = tuple(u32() for _ in range(rank))
        code = take(1)[0]
        if code not in _DTYPE_CODES:
            raise DataError(f"{path}: unknown dtype code {code}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(count * code), dtype=_DTYPE_CODES[code]).reshape(shape)
        arrays[name] = arr.copy()
    return config_text, arch_hash, arrays
