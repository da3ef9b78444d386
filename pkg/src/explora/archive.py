"""Versioned tensor archive used for deltas, merged models, run state, and datasets.

Layout::

    b"EXPL0001"                      8-byte magic
    uint64 LE                        manifest length in bytes
    manifest                         UTF-8 JSON, sorted keys
    tensor payload                   little-endian, row-major, entries back to back

The manifest carries ``entries`` (name, dtype, shape, offset, nbytes) plus free-form
metadata, and a ``checksum`` (sha256 over the manifest without the checksum field,
followed by the payload).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EXPL0001"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "|u1", "bool": "|b1"}


class ArchiveError(ValueError):
    """Malformed, tampered, or incompatible archive."""


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _checksum(manifest: dict, payload: bytes) -> str:
    body = {k: v for k, v in manifest.items() if k != "checksum"}
    h = hashlib.sha256(_canonical(body))
    h.update(payload)
    return h.hexdigest()


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        key = arr.dtype.name
        if key not in _DTYPES:
            raise ArchiveError(f"unsupported dtype {key} for '{name}'")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[key])).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {"format_version": FORMAT_VERSION, "meta": meta or {}, "entries": entries}
    manifest["checksum"] = _checksum(manifest, payload)
    head = _canonical(manifest)
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def loads(blob: bytes, verify: bool = True) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise ArchiveError("bad magic: not an EXPL0001 archive")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArchiveError(f"unreadable manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"unsupported format version {manifest.get('format_version')}")
    payload = blob[16 + n:]
    if verify and manifest.get("checksum") != _checksum(manifest, payload):
        raise ArchiveError("checksum mismatch: manifest or payload was modified")
    tensors = {}
    for e in manifest["entries"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(_DTYPES[e["dtype"]])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.dtype(e["dtype"]), copy=True)
    return manifest["meta"], tensors


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)
    return path


def load(path, verify: bool = True) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), verify)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
