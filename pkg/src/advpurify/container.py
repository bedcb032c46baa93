"""Versioned binary container for datasets, checkpoints, and attack outputs.

Layout (little endian):

    bytes 0..8    magic ``b"ADVPURIF"``
    bytes 8..12   uint32 format version (currently 1)
    bytes 12..20  uint64 header length H
    bytes 20..20+H  UTF-8 JSON header
    remainder     raw C-order array payload

The JSON header holds ``kind`` (what the file contains), a free-form
``meta`` dict, a ``sha256`` of the payload, and one entry per array with
name, dtype, shape, and byte offset into the payload. All multi-byte
integers in the fixed prefix are little endian so files are portable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerFormatError, ContainerVersionError

MAGIC = b"ADVPURIF"
VERSION = 1

_PREFIX = struct.Struct("<8sIQ")


def write_container(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    """Write ``arrays`` plus metadata to ``path``; returns the path written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    payload = bytearray()
    entries = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())

    header = {
        "kind": kind,
        "meta": meta,
        "arrays": entries,
        "sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    return path


def read_container(
    path: str | Path, expected_kind: str | None = None
) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read a container; returns ``(kind, meta, arrays)``.

    Raises ContainerFormatError on bad magic, truncation, or checksum
    mismatch, and ContainerVersionError when the file was written by a
    newer format version.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ContainerFormatError(f"cannot read {path}: {exc}") from exc

    if len(raw) < _PREFIX.size:
        raise ContainerFormatError(f"{path}: file too short to be a container")
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {magic!r}")
    if version > VERSION:
        raise ContainerVersionError(
            f"{path}: container version {version} is newer than supported version {VERSION}"
        )

    header_end = _PREFIX.size + header_len
    if len(raw) < header_end:
        raise ContainerFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: corrupt header: {exc}") from exc

    payload = raw[header_end:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ContainerFormatError(f"{path}: payload checksum mismatch")

    kind = header.get("kind", "")
    if expected_kind is not None and kind != expected_kind:
        raise ContainerFormatError(f"{path}: expected kind {expected_kind!r}, found {kind!r}")

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ContainerFormatError(f"{path}: array {entry['name']!r} extends past payload")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()

    return kind, header.get("meta", {}), arrays


def file_sha256(path: str | Path, short: int | None = None) -> str:
    """Hex SHA-256 of a file, optionally truncated to ``short`` characters."""
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return digest[:short] if short else digest
