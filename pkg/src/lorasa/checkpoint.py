"""Checkpoint container: JSON manifest plus a checksummed binary blob.

Layout: 8-byte magic, u32 format version, u64 manifest length, manifest JSON
(UTF-8), then the blob of named arrays at recorded offsets. All arrays are
little-endian row-major; training state uses 64-bit floats, exported merged
policies 32-bit. The manifest carries shapes, dtypes, offsets, RNG states,
the config hash, and a SHA-256 of the blob so truncation or corruption is
detected on read.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .numerics import Array

MAGIC = b"LRSACKPT"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<f4", "<i8", "|b1"}


class CheckpointError(RuntimeError):
    """Raised on integrity or format violations while reading a checkpoint."""


def _canonical_dtype(arr: Array) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "<f4" if arr.dtype.itemsize == 4 else "<f8"
    if kind in ("i", "u"):
        return "<i8"
    if kind == "b":
        return "|b1"
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


def write_checkpoint(path: str | Path, arrays: dict[str, Array], meta: dict) -> None:
    """Serialize named arrays plus JSON metadata to ``path`` atomically."""
    path = Path(path)
    entries = []
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = _canonical_dtype(arr)
        data = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arrays": entries,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "meta": meta,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        fh.write(blob)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict[str, Array], dict]:
    """Load a checkpoint; raises CheckpointError on any integrity problem."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = struct.unpack_from("<I", raw, len(MAGIC))[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    mlen = struct.unpack_from("<Q", raw, len(MAGIC) + 4)[0]
    header_end = len(MAGIC) + 12
    try:
        manifest = json.loads(raw[header_end:header_end + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    blob = raw[header_end + mlen:]
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise CheckpointError(f"{path}: blob checksum mismatch (truncated or corrupted)")
    arrays: dict[str, Array] = {}
    for entry in manifest["arrays"]:
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointError(f"{path}: illegal dtype {dtype}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(blob):
            raise CheckpointError(f"{path}: array '{entry['name']}' exceeds blob")
        arr = np.frombuffer(blob[start:start + nbytes], dtype=dtype)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, manifest["meta"]


def read_meta(path: str | Path) -> dict:
    """Read only the manifest metadata (no blob verification)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 12)
        if len(head) < len(MAGIC) + 12 or head[:len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        mlen = struct.unpack_from("<Q", head, len(MAGIC) + 4)[0]
        try:
            manifest = json.loads(fh.read(mlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    return manifest["meta"]


def checkpoint_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def arrays_checksum(arrays: dict[str, Array]) -> str:
    """Order-independent SHA-256 over named array contents (frozen-backbone
    invariant checks)."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        digest.update(name.encode())
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()
