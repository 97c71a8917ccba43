"""Versioned binary container: magic bytes, JSON header, float64 payload.

Layout: 8 magic bytes, a little-endian uint32 header length, the UTF-8
JSON header, then the declared arrays concatenated as little-endian
float64.  The header's "arrays" entry lists (name, shape) pairs in
payload order, so files are self-describing and byte-deterministic.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError


def write_blob(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]):
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    manifest = [[name, list(np.asarray(arr).shape)] for name, arr in arrays.items()]
    full_header = dict(header)
    full_header["arrays"] = manifest
    head = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for _, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_blob(path, expected_magic: bytes):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError("file too short to hold a header", offset=len(raw))
    magic = raw[:8]
    if magic != expected_magic:
        raise FormatError(
            f"magic bytes {magic!r} do not match expected {expected_magic!r}"
        )
    (head_len,) = struct.unpack("<I", raw[8:12])
    head_end = 12 + head_len
    if len(raw) < head_end:
        raise FormatError("truncated header", offset=len(raw))
    try:
        header = json.loads(raw[12:head_end].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    arrays = {}
    pos = head_end
    for name, shape in header.pop("arrays"):
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(raw) < pos + nbytes:
            raise FormatError(f"truncated payload for array {name!r}", offset=len(raw))
        arrays[name] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    return header, arrays
