"""GELW model checkpoints: a flat structured binary of named float32 tensors.

    magic "GELW" | version u32=1
    then per tensor:  name length u16 | name bytes | rank u8 | dims u32 each
                      | float32 payload (little-endian)

Model metadata (schedule, widths, ...) rides along as an ordinary tensor
named "__header__", so the wire format stays uniform.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"GELW"
VERSION = 1
HEADER_NAME = "__header__"


def write_checkpoint(path, tensors: dict[str, np.ndarray], header: np.ndarray | None = None) -> int:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    items = list(tensors.items())
    if header is not None:
        items.insert(0, (HEADER_NAME, np.asarray(header, dtype=np.float32)))
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f4")  # keeps rank, including 0-d
        raw_name = name.encode("utf-8")
        blob += struct.pack("<H", len(raw_name))
        blob += raw_name
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.tobytes(order="C")
    path.write_bytes(blob)
    return len(blob)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Returns (tensors, header-or-None)."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError("checkpoint too short for header")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 8
    tensors: dict[str, np.ndarray] = {}
    header = None
    while off < len(blob):
        try:
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated checkpoint near offset {off}: {exc}") from exc
        if name == HEADER_NAME:
            header = arr.copy()
        else:
            tensors[name] = arr.copy()
    return tensors, header


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
