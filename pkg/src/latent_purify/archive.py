"""Binary container framing shared by the LPDS, MLVC and ADVR formats.

Layout::

    magic (4 bytes) | version (1 byte) | manifest length (u64 LE) |
    manifest (UTF-8 JSON) | payload | CRC-64/XZ of everything before (u64 LE)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Callable

import crcmod
import numpy as np

# CRC-64/XZ (ECMA-182 polynomial, reflected, inverted)
crc64 = crcmod.mkCrcFun(0x142F0E1EBA9EA3693, initCrc=0, rev=True, xorOut=0xFFFFFFFFFFFFFFFF)

_HEAD = struct.Struct("<4sBQ")


class ArchiveError(ValueError):
    """Base class for malformed container files."""


class FormatError(ArchiveError):
    """Wrong magic bytes, unsupported version or unparseable manifest."""


class TruncatedError(ArchiveError):
    """The file is shorter (or longer) than its manifest implies."""


class ChecksumError(ArchiveError):
    """Stored CRC-64 does not match the contents."""


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def pack(magic: bytes, version: int, manifest: dict, payload: bytes) -> bytes:
    mbytes = canonical_json(manifest)
    body = _HEAD.pack(magic, version, len(mbytes)) + mbytes + payload
    return body + struct.pack("<Q", crc64(body))


def unpack(
    blob: bytes,
    magic: bytes,
    version: int,
    payload_size: Callable[[dict], int],
) -> tuple[dict, memoryview]:
    """Validate a container and return ``(manifest, payload)``.

    ``payload_size`` maps the decoded manifest to the number of payload bytes
    expected, so that truncation is reported as such rather than as a
    checksum failure.
    """
    if len(blob) < 4 or blob[:4] != magic:
        raise FormatError(f"bad magic: expected {magic!r}, found {bytes(blob[:4])!r}")
    if len(blob) < _HEAD.size:
        raise TruncatedError("file ends inside the header")
    _, ver, mlen = _HEAD.unpack_from(blob, 0)
    if ver != version:
        raise FormatError(f"unsupported {magic.decode()} version {ver} (expected {version})")
    mstart = _HEAD.size
    if len(blob) < mstart + mlen:
        raise TruncatedError("file ends inside the manifest")
    try:
        manifest = json.loads(bytes(blob[mstart : mstart + mlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    pstart = mstart + mlen
    try:
        psize = int(payload_size(manifest))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest missing required fields: {exc}") from exc
    expected = pstart + psize + 8
    if len(blob) < expected:
        raise TruncatedError(f"expected {expected} bytes, found {len(blob)}")
    if len(blob) > expected:
        raise TruncatedError(f"{len(blob) - expected} unexpected trailing bytes")
    (stored,) = struct.unpack_from("<Q", blob, expected - 8)
    actual = crc64(bytes(blob[: expected - 8]))
    if stored != actual:
        raise ChecksumError(f"CRC-64 mismatch: stored {stored:016x}, computed {actual:016x}")
    return manifest, memoryview(blob)[pstart : pstart + psize]


def peek_manifest(blob: bytes) -> tuple[bytes, dict]:
    """``(magic, manifest)`` of a container without validating its payload."""
    if len(blob) < _HEAD.size:
        raise TruncatedError("file ends inside the header")
    magic, _, mlen = _HEAD.unpack_from(blob, 0)
    try:
        return magic, json.loads(bytes(blob[_HEAD.size : _HEAD.size + mlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc


def stored_crc(blob: bytes) -> int:
    """The CRC-64 trailer of a container (its identity checksum)."""
    return struct.unpack_from("<Q", blob, len(blob) - 8)[0]


def write_bytes(path: str | Path, blob: bytes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)


# ---------------------------------------------------------------------------
# MLVC checkpoints: named float32 parameter tables


MLVC_MAGIC = b"MLVC"
MLVC_VERSION = 1


def pack_checkpoint(kind: str, spec: dict, params: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"kind": kind, "spec": spec, "params": table, "payload_bytes": offset}
    if meta:
        manifest["meta"] = meta
    return pack(MLVC_MAGIC, MLVC_VERSION, manifest, b"".join(chunks))


def unpack_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    manifest, payload = unpack(blob, MLVC_MAGIC, MLVC_VERSION, lambda m: m["payload_bytes"])
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return manifest, params


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack_checkpoint(Path(path).read_bytes())
