"""Checkpoint container: one binary file of named float32 tensors.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, raw tensor payload.  The manifest records name, shape, dtype and
byte offset per tensor plus arbitrary JSON metadata (the run config lives
there so shapes can be validated on load).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EHCKPT01"
TENSOR_DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=TENSOR_DTYPE)
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": TENSOR_DTYPE, "offset": offset, "nbytes": arr.nbytes}
        )
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps(
        {"format_version": 1, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (manifest_len,) = struct.unpack_from("<Q", data, len(MAGIC))
    manifest_start = len(MAGIC) + 8
    try:
        manifest = json.loads(data[manifest_start : manifest_start + manifest_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    payload_start = manifest_start + manifest_len
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != TENSOR_DTYPE:
            raise CheckpointError(f"{path}: tensor {entry['name']} has dtype {entry['dtype']}")
        start = payload_start + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(raw, dtype=TENSOR_DTYPE).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    return tensors, manifest["meta"]
