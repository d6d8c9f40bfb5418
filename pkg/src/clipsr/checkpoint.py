"""Portable checkpoint files.

Layout::

    b"CLIPSRCK"                      8-byte magic
    u32 little-endian                format version
    u64 little-endian                header length in bytes
    header                           UTF-8 JSON (manifest, config, step, meta)
    payload                          entries back to back, little-endian floats

Each manifest entry records ``name``, ``shape``, ``dtype`` (``<f4`` or
``<f8``), ``offset`` and ``nbytes`` relative to the payload start. The
header carries the SHA-256 of the payload. Names, shapes and the config
are validated before any payload byte is read; nothing is returned unless
the whole payload checks out.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .config import ARCH_KEYS, arch_mismatches
from .errors import ChecksumError, ValidationError

MAGIC = b"CLIPSRCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Entries under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def _entry_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "<f8"
    if arr.dtype == np.float32:
        return "<f4"
    raise ValidationError(f"checkpoint entries must be float32 or float64, got {arr.dtype}")


def encode_checkpoint(arrays: Mapping[str, np.ndarray], config: dict | None = None, step: int = 0,
                      meta: dict | None = None) -> bytes:
    entries, chunks = [], []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _entry_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "entries": entries,
        "config": config or {},
        "step": int(step),
        "meta": meta or {},
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], config: dict | None = None, step: int = 0,
                    meta: dict | None = None) -> None:
    """Write atomically: a temp file in the same directory is renamed into place."""
    blob = encode_checkpoint(arrays, config, step, meta)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header(fh) -> tuple[dict, int]:
    prefix = fh.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise ChecksumError("checkpoint truncated inside the file prefix")
    magic, version, hlen = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise ValidationError(f"not a checkpoint file (magic {magic!r})")
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    hbytes = fh.read(hlen)
    if len(hbytes) < hlen:
        raise ChecksumError("checkpoint truncated inside the header")
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"checkpoint header is corrupt: {exc}") from None
    return header, _PREFIX.size + hlen


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
    return header


def validate_manifest(header: dict, expected: Mapping[str, tuple] | None = None,
                      config: dict | None = None, keys: Iterable[str] = ARCH_KEYS) -> None:
    """Reject unknown/missing names, shape drift and architecture mismatches."""
    entries = header["entries"]
    end = 0
    for e in entries:
        if e["dtype"] not in _DTYPES:
            raise ValidationError(f"entry {e['name']!r} has unsupported dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != count * _DTYPES[e["dtype"]].itemsize or e["offset"] != end:
            raise ValidationError(f"entry {e['name']!r} has an inconsistent byte range")
        end += e["nbytes"]
    if end != header["payload_bytes"]:
        raise ValidationError("manifest byte ranges do not cover the payload")
    if config is not None:
        bad = arch_mismatches(header.get("config", {}), config, keys)
        if bad:
            raise ValidationError("checkpoint config mismatch: " + "; ".join(bad))
    if expected is None:
        return
    names = [e["name"] for e in entries]
    unknown = sorted(set(names) - set(expected))
    missing = sorted(set(expected) - set(names))
    if unknown:
        raise ValidationError(f"checkpoint has unknown entries: {', '.join(unknown)}")
    if missing:
        raise ValidationError(f"checkpoint is missing entries: {', '.join(missing)}")
    for e in entries:
        want = tuple(expected[e["name"]])
        if tuple(e["shape"]) != want:
            raise ValidationError(f"shape drift for {e['name']!r}: file {tuple(e['shape'])}, model {want}")


def load_checkpoint(path, expected: Mapping[str, tuple] | None = None, config: dict | None = None,
                    keys: Iterable[str] = ARCH_KEYS) -> Checkpoint:
    """Read, validate and checksum a checkpoint; returns fresh arrays.

    ``expected`` maps entry names to shapes (pass ``None`` to skip the name
    audit); ``config`` is compared on ``keys``.
    """
    with open(path, "rb") as fh:
        header, start = _read_header(fh)
        validate_manifest(header, expected, config, keys)
        payload = fh.read(header["payload_bytes"] + 1)
    if len(payload) != header["payload_bytes"]:
        kind = "truncated" if len(payload) < header["payload_bytes"] else "has trailing bytes"
        raise ChecksumError(f"checkpoint payload {kind} ({len(payload)} of {header['payload_bytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumError("checkpoint payload checksum mismatch")
    arrays = {}
    for e in header["entries"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(arrays, header.get("config", {}), int(header.get("step", 0)), header.get("meta", {}))


def prefixed(prefix: str, arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in arrays.items()}
