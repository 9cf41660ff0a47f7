"""
Manifest + blob container shared by checkpoints and exported datasets.

Layout::

    EGOPROMPT-BLOB <version> <manifest-bytes> <manifest-crc32>\\n
    <manifest: UTF-8 JSON, sorted keys>
    <blob: little-endian arrays concatenated in registry order>

Every registry entry carries its own CRC32 and the blob carries a whole-blob
CRC32, so any single corrupted byte surfaces as a ``CheckpointError``.
"""
import json
import logging
import os
import zlib
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from utils.errors import ChecksumError, CheckpointError, TruncatedBlobError, VersionMismatchError

logger = logging.getLogger(__name__)

MAGIC = "EGOPROMPT-BLOB"
FORMAT_VERSION = 1
_WIRE_DTYPES = {"float32": "<f4", "int32": "<i4"}


def _wire_dtype(arr: np.ndarray) -> str:
    return "int32" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "float32"


def encode_blob(kind: str, meta: Dict[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    registry, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = _wire_dtype(arr)
        data = np.ascontiguousarray(arr, dtype=_WIRE_DTYPES[dtype]).tobytes()
        registry.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
            "length": len(data),
            "crc32": zlib.crc32(data),
        })
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "registry": registry,
        "blob_length": len(blob),
        "blob_crc32": zlib.crc32(blob),
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = f"{MAGIC} {FORMAT_VERSION} {len(manifest_bytes)} {zlib.crc32(manifest_bytes)}\n".encode("ascii")
    return header + manifest_bytes + blob


def _parse_header(data: bytes) -> Tuple[int, int, int, int]:
    newline = data.find(b"\n")
    if newline < 0:
        raise TruncatedBlobError("file ends before the header line is complete")
    parts = data[:newline].decode("ascii", errors="replace").split(" ")
    if len(parts) != 4 or parts[0] != MAGIC:
        raise CheckpointError("not an EGOPROMPT blob (bad header)")
    try:
        version, manifest_len, manifest_crc = (int(p) for p in parts[1:])
    except ValueError as exc:
        raise CheckpointError(f"malformed header fields: {parts[1:]}") from exc
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    return newline + 1, manifest_len, manifest_crc, version


def decode_blob(data: bytes, expected_kind: Optional[str] = None) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    start, manifest_len, manifest_crc, _ = _parse_header(data)
    manifest_bytes = data[start:start + manifest_len]
    if len(manifest_bytes) < manifest_len:
        raise TruncatedBlobError(f"manifest truncated: {len(manifest_bytes)} of {manifest_len} bytes")
    if zlib.crc32(manifest_bytes) != manifest_crc:
        raise ChecksumError("manifest CRC32 mismatch")
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError("manifest is not valid JSON") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"manifest format_version {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    if expected_kind is not None and manifest.get("kind") != expected_kind:
        raise CheckpointError(f"expected a {expected_kind!r} file, found {manifest.get('kind')!r}")

    blob = data[start + manifest_len:]
    if len(blob) < manifest["blob_length"]:
        raise TruncatedBlobError(f"blob truncated: {len(blob)} of {manifest['blob_length']} bytes")
    if len(blob) > manifest["blob_length"]:
        raise CheckpointError(f"{len(blob) - manifest['blob_length']} unexpected trailing bytes")
    if zlib.crc32(blob) != manifest["blob_crc32"]:
        raise ChecksumError("blob CRC32 mismatch")

    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["registry"]:
        chunk = blob[entry["offset"]:entry["offset"] + entry["length"]]
        if zlib.crc32(chunk) != entry["crc32"]:
            raise ChecksumError(f"CRC32 mismatch in array {entry['name']!r}")
        wire = _WIRE_DTYPES[entry["dtype"]]
        arr = np.frombuffer(chunk, dtype=wire).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32 if entry["dtype"] == "float32" else np.int32)
    return manifest, arrays


def write_atomic(path: Union[str, Path], data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_blob_file(path: Union[str, Path], kind: str, meta: Dict[str, Any],
                    arrays: Mapping[str, np.ndarray]) -> int:
    data = encode_blob(kind, meta, arrays)
    write_atomic(path, data)
    logger.debug("wrote %s %s (%d arrays, %d bytes)", kind, path, len(arrays), len(data))
    return zlib.crc32(data)


def read_blob_file(path: Union[str, Path], expected_kind: Optional[str] = None):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return decode_blob(data, expected_kind)


def file_crc32(path: Union[str, Path]) -> int:
    return zlib.crc32(Path(path).read_bytes())
