"""Versioned tensor container: a JSON text manifest followed by raw float32 data.

Layout::

    CRGAN-CKPT <manifest length in bytes>\\n
    <manifest JSON, keys sorted>\\n
    <payload: little-endian float32 arrays back to back>

The manifest records every tensor's name, shape, original dtype, and byte
offset, plus the payload length and its SHA-256. Integer tensors are stored
as float32 and must be exactly representable.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any

import numpy as np

MAGIC = b"CRGAN-CKPT"
FORMAT_VERSION = 1
_STORED = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CheckpointIntegrityError(CheckpointError):
    """File is truncated, corrupted, or not a container at all."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCompatibilityError(CheckpointError):
    """Container is valid but does not match the requested configuration."""


def encode_container(meta: dict[str, Any], tensors: dict[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        stored = arr.astype(_STORED)
        if arr.dtype.kind in "iub" and not np.array_equal(stored.astype(arr.dtype), arr):
            raise CheckpointError(f"{name}: integer values not exactly representable as float32")
        raw = np.ascontiguousarray(stored).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = dict(meta)
    manifest.update(
        format_version=FORMAT_VERSION,
        tensors=entries,
        payload_nbytes=len(payload),
        payload_sha256=hashlib.sha256(payload).hexdigest(),
    )
    text = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    return MAGIC + b" " + str(len(text)).encode() + b"\n" + text + b"\n" + payload


def decode_container(data: bytes, source: str = "<bytes>") -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    newline = data.find(b"\n")
    first = data[:newline] if newline >= 0 else b""
    parts = first.split(b" ")
    if len(parts) != 2 or parts[0] != MAGIC or not parts[1].isdigit():
        raise CheckpointIntegrityError(f"{source}: not a checkpoint container (bad header line)")
    mlen = int(parts[1])
    start = newline + 1
    if len(data) < start + mlen + 1:
        raise CheckpointIntegrityError(f"{source}: file truncated inside the manifest")
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{source}: unreadable manifest ({exc})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: format_version {version!r} is not supported (expected {FORMAT_VERSION})")
    payload = data[start + mlen + 1 :]
    if len(payload) != manifest["payload_nbytes"]:
        raise CheckpointIntegrityError(
            f"{source}: payload is {len(payload)} bytes, manifest declares {manifest['payload_nbytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointIntegrityError(f"{source}: payload checksum mismatch")
    tensors = {}
    for entry in manifest["tensors"]:
        flat = np.frombuffer(payload, dtype=_STORED, count=entry["nbytes"] // 4, offset=entry["offset"])
        tensors[entry["name"]] = flat.reshape(entry["shape"]).astype(entry["dtype"])
    meta = {k: v for k, v in manifest.items() if k not in ("tensors", "payload_nbytes", "payload_sha256")}
    return meta, tensors


def write_container(path, meta: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    data = encode_container(meta, tensors)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_container(data, os.fspath(path))
