"""Versioned length-prefixed container used for datasets, checkpoints and
adversarial/purified image sets.

Layout (all integers little-endian)::

    magic      4 bytes   b"F3DS" (datasets) or b"F3CK" (checkpoints)
    version    uint32
    hlen       uint64    byte length of the JSON header
    header     hlen bytes, UTF-8 JSON with sorted keys
    payload    concatenated little-endian float64/int64 arrays

The header lists every array as ``{"name", "dtype", "shape", "offset",
"nbytes"}`` plus a SHA-256 of the payload, so truncation and bit rot are
both detected on load.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class CorruptFileError(ValueError):
    pass


class VersionError(ValueError):
    pass


def _dtype_code(arr):
    if arr.dtype.kind == "f":
        return "f8"
    if arr.dtype.kind in "iub":
        return "i8"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def write_container(path, magic, version, meta, arrays):
    chunks = []
    index = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        index.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"meta": meta, "arrays": index,
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def read_container(path, magic, version):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise CorruptFileError(f"{path}: file too short for header")
    got_magic, got_version, hlen = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise CorruptFileError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise VersionError(
            f"{path}: format version {got_version} is not supported (expected {version})")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from None
    payload = blob[start + hlen:]
    expected = sum(a["nbytes"] for a in header["arrays"])
    if len(payload) != expected:
        raise CorruptFileError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptFileError(f"{path}: payload checksum mismatch")
    arrays = {}
    for a in header["arrays"]:
        buf = payload[a["offset"]:a["offset"] + a["nbytes"]]
        arr = np.frombuffer(buf, dtype=_DTYPES[a["dtype"]]).reshape(a["shape"])
        arrays[a["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header["meta"], arrays


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()
