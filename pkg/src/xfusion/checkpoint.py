"""Versioned binary checkpoint container for named float64 arrays.

Layout: 8-byte magic, u32 version, u64 manifest length, JSON manifest
(kind, config digest, and per-array name/shape/byte offset), then the raw
little-endian float64 payload. Byte-deterministic for identical inputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"XFCKPT\x00\x01"
VERSION = 1


class CheckpointError(RuntimeError):
    """Missing, corrupt, or incompatible checkpoint file."""


def save_checkpoint(path, arrays: dict[str, np.ndarray], config_digest: str, kind: str = "fusion") -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())
    manifest = json.dumps(
        {"version": VERSION, "kind": kind, "config_digest": config_digest, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        fh.write(bytes(payload))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str, str]:
    """Returns (arrays, config_digest, kind)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (manifest_len,) = struct.unpack("<Q", blob[12:20])
    manifest_end = 20 + manifest_len
    if len(blob) < manifest_end:
        raise CheckpointError(f"truncated checkpoint manifest: {path}")
    try:
        manifest = json.loads(blob[20:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint manifest: {err}") from err
    payload = blob[manifest_end:]
    arrays = {}
    for entry in manifest["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"truncated checkpoint payload for array '{entry['name']}'")
        arr = np.frombuffer(payload[start : start + nbytes], dtype="<f8").reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float64)
    return arrays, manifest["config_digest"], manifest["kind"]
