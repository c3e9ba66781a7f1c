"""Standalone GELD writer/validator.

This package deliberately carries its own implementation of the wire format
(magic "GELD", version 1, fixed-stride records) so that byte-level
interoperability with consumers is established by the format contract, not
by shared code.

    magic "GELD" | version u32=1 | M u32 | C u32 | K u32 | N u64
    record:  class u32 | subdomain u32 | split u8 | M x float32 (LE)

The manifest rides in a JSON sidecar with the same basename and a
".manifest" suffix.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GELD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")
_REC = struct.Struct("<IIB")

SPLITS = {"train": 0, "test": 1}


class GeldFormatError(Exception):
    pass


class GeldIntegrityError(Exception):
    pass


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".manifest")


def write_geld(
    path,
    vectors: np.ndarray,
    class_ids,
    subdomain_ids,
    splits,
    class_names: list[str],
    subdomain_names: list[str],
    source_tag: str,
) -> int:
    """Write records plus manifest; the binary lands via an atomic rename."""
    path = Path(path)
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    n, m = vectors.shape
    c, k = len(class_names), len(subdomain_names)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    subdomain_ids = np.asarray(subdomain_ids, dtype=np.int64)
    split_codes = np.asarray(
        [SPLITS[s] if isinstance(s, str) else int(s) for s in splits], dtype=np.uint8
    )

    hist = np.zeros((c, k, 2), dtype=np.int64)
    np.add.at(hist, (class_ids, subdomain_ids, split_codes.astype(np.int64)), 1)

    blob = bytearray()
    blob += _HEADER.pack(MAGIC, VERSION, m, c, k, n)
    for i in range(n):
        blob += _REC.pack(int(class_ids[i]), int(subdomain_ids[i]), int(split_codes[i]))
        blob += vectors[i].tobytes()

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    manifest = {
        "m": m,
        "c": c,
        "k": k,
        "class_names": list(class_names),
        "subdomain_names": list(subdomain_names),
        "histogram": hist.tolist(),
        "source_tag": source_tag,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")
    return len(blob)


def verify_geld(path) -> dict:
    """Validate magic/version/stride and manifest agreement.

    Returns a summary dict with per-cell counts; raises GeldFormatError or
    GeldIntegrityError naming the first failing offset.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise GeldFormatError(f"offset 0: file too short for header ({len(blob)} bytes)")
    magic, version, m, c, k, n = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise GeldFormatError(f"offset 0: bad magic {magic!r}")
    if version != VERSION:
        raise GeldFormatError(f"offset 4: unsupported version {version}")
    stride = _REC.size + 4 * m
    expected = _HEADER.size + n * stride
    if len(blob) != expected:
        raise GeldFormatError(
            f"offset {min(len(blob), expected)}: expected {expected} bytes, found {len(blob)}"
        )
    hist = np.zeros((c, k, 2), dtype=np.int64)
    off = _HEADER.size
    for i in range(n):
        cid, sid, sp = _REC.unpack_from(blob, off)
        if cid >= c:
            raise GeldIntegrityError(f"offset {off}: record {i} class {cid} >= C={c}")
        if sid >= k:
            raise GeldIntegrityError(f"offset {off + 4}: record {i} subdomain {sid} >= K={k}")
        if sp not in (0, 1):
            raise GeldIntegrityError(f"offset {off + 8}: record {i} bad split {sp}")
        values = np.frombuffer(blob, dtype="<f4", count=m, offset=off + _REC.size)
        if not np.isfinite(values).all():
            raise GeldIntegrityError(f"offset {off + _REC.size}: record {i} non-finite value")
        hist[cid, sid, sp] += 1
        off += stride

    mpath = manifest_path(path)
    if not mpath.exists():
        raise GeldFormatError(f"missing manifest sidecar {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise GeldFormatError(f"manifest not valid JSON: {exc}") from exc
    if (manifest.get("m"), manifest.get("c"), manifest.get("k")) != (m, c, k):
        raise GeldIntegrityError("manifest dimensions disagree with binary header")
    if np.asarray(manifest.get("histogram", [])).tolist() != hist.tolist():
        raise GeldIntegrityError("manifest histogram disagrees with record counts")
    return {
        "path": str(path),
        "m": m,
        "c": c,
        "k": k,
        "n": n,
        "histogram": hist,
        "class_names": manifest["class_names"],
        "subdomain_names": manifest["subdomain_names"],
        "source_tag": manifest.get("source_tag", ""),
    }
