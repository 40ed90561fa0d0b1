"""Versioned binary checkpoint container.

Layout: 4-byte magic, little-endian uint32 format version, little-endian
uint64 manifest length, UTF-8 JSON manifest, raw tensor payload. The manifest
maps tensor names to shape/dtype/offset and carries a JSON state blob plus a
payload digest, so truncation or corruption is detected at load time and a
round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

_MAGIC = b"DRXC"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _canonical(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype.kind == "f":
        return np.ascontiguousarray(array, dtype="<f8")
    if array.dtype.kind in "iu":
        return np.ascontiguousarray(array, dtype="<i8")
    raise CheckpointError(f"unsupported tensor dtype {array.dtype}")


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray],
                    state: dict) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = _canonical(tensors[name])
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "state": state,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    (manifest_len,) = struct.unpack("<Q", data[8:16])
    manifest_end = 16 + manifest_len
    if len(data) < manifest_end:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16:manifest_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    payload = data[manifest_end:]
    if len(payload) != manifest["payload_nbytes"]:
        raise CheckpointError(f"{path}: truncated payload")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype=entry["dtype"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, manifest["state"]
