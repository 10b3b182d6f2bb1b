"""Deterministic single-file container for named arrays.

Checkpoints must be byte-identical across runs that produce the same
parameters. Zip-based containers embed timestamps, so this is a flat
binary format instead: a magic string, a sorted-key JSON header
describing metadata and the array table, then the raw little-endian
array bytes in table order. Writing the same arrays twice yields the
same bytes.

Layout:

    6 bytes   magic  b"DFCK\\x01\\n"
    8 bytes   header length, little-endian unsigned
    N bytes   JSON header, UTF-8, sorted keys, no whitespace
    ...       array payloads, row-major, little-endian, concatenated

Header schema:

    {"arrays": [{"dtype": "<f4", "name": ..., "shape": [...]}, ...],
     "meta": {...}}

Array entries are sorted by name; payloads follow in the same order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ParseError, UnsupportedFormatError

MAGIC = b"DFCK\x01\n"

_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|u1"}


def _canonical_dtype(arr):
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = dt.str
    if code == "|i1":
        code = "|u1"
    if code not in _ALLOWED_DTYPES:
        raise UnsupportedFormatError(f"dtype {arr.dtype} not supported in checkpoints")
    return code


def save_arrays(path, arrays, meta=None):
    """Write named arrays plus a JSON-compatible metadata dict to `path`.

    `arrays` maps name -> numpy array. Keys are sorted, so insertion
    order does not affect the bytes on disk.
    """
    table = []
    payloads = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        code = _canonical_dtype(arr)
        arr = arr.astype(np.dtype(code), copy=False)
        table.append({"dtype": code, "name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"arrays": table, "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_arrays(path):
    """Read a container written by `save_arrays`.

    Returns (arrays, meta) with arrays as a dict of numpy arrays.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ParseError("not a checkpoint file (bad magic)", path=str(path))
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise ParseError("truncated checkpoint header", path=str(path))
        (header_len,) = struct.unpack("<Q", raw_len)
        raw_header = fh.read(header_len)
        if len(raw_header) != header_len:
            raise ParseError("truncated checkpoint header", path=str(path))
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"bad checkpoint header: {exc}", path=str(path)) from exc
        arrays = {}
        for entry in header.get("arrays", []):
            code = entry["dtype"]
            if code not in _ALLOWED_DTYPES:
                raise UnsupportedFormatError(f"dtype {code} not supported in checkpoints")
            dt = np.dtype(code)
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            blob = fh.read(count * dt.itemsize)
            if len(blob) != count * dt.itemsize:
                raise ParseError(f"truncated payload for array {entry['name']!r}", path=str(path))
            arrays[entry["name"]] = np.frombuffer(blob, dtype=dt).reshape(shape).copy()
        return arrays, header.get("meta", {})
