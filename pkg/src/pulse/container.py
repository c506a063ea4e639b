"""Binary container: JSON manifest followed by raw little-endian arrays.

Byte layout (all offsets absolute from file start):

    bytes 0..8    magic ``PULSEBOX``
    bytes 8..16   uint64 little-endian manifest length ``N``
    bytes 16..16+N UTF-8 JSON manifest
    remainder     raw array payload, one contiguous block per array

Manifest schema::

    {
      "format": "<format-name>/<version>",
      "arrays": [
        {"name": str, "dtype": "float32"|"int32",
         "shape": [int, ...], "offset": int, "nbytes": int},
        ...
      ],
      "meta": { ... format-specific JSON ... }
    }

Only float32 and int32 payloads are allowed so any language can read the
files without dtype negotiation.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"PULSEBOX"

_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


def write_container(path, format_version: str, arrays: dict, meta: dict) -> None:
    """Write ``arrays`` (name -> ndarray) and JSON-serializable ``meta`` to ``path``."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise FormatError(f"array {name!r} has dtype {dtype_name}; only float32/int32 are stored")
        blob = arr.astype(_DTYPES[dtype_name], copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype_name, "shape": list(arr.shape),
                        "offset": None, "nbytes": len(blob)})
        blobs.append(blob)

    # Two-pass offset assignment: manifest length depends on the offsets'
    # decimal width, so fix a manifest with placeholder offsets first.
    def render(offsets):
        for e, off in zip(entries, offsets):
            e["offset"] = off
        doc = {"format": format_version, "arrays": entries, "meta": meta}
        return json.dumps(doc, sort_keys=True).encode("utf-8")

    offsets = [0] * len(entries)
    manifest = render(offsets)
    for _ in range(8):
        payload_start = len(MAGIC) + 8 + len(manifest)
        pos = payload_start
        offsets = []
        for e in entries:
            offsets.append(pos)
            pos += e["nbytes"]
        new_manifest = render(offsets)
        if len(new_manifest) == len(manifest):
            manifest = new_manifest
            break
        manifest = new_manifest
    else:
        raise FormatError("manifest offsets failed to stabilize")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_container(path, expect_format: str | None = None):
    """Read a container; returns ``(format_version, arrays, meta)``.

    ``expect_format`` may name a full version ("pulse-fold/1") or a family
    prefix ("pulse-fold/"); a mismatch raises FormatError.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes, not a PULSEBOX container")
    (mlen,) = struct.unpack("<Q", raw[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + mlen > len(raw):
        raise FormatError(f"{path}: manifest length {mlen} overruns file")
    try:
        doc = json.loads(raw[start: start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON: {exc}") from exc

    fmt = doc.get("format")
    if not isinstance(fmt, str):
        raise FormatError(f"{path}: manifest missing 'format'")
    if expect_format is not None:
        ok = fmt == expect_format or (expect_format.endswith("/") and fmt.startswith(expect_format))
        if not ok:
            raise FormatError(f"{path}: format {fmt!r}, expected {expect_format!r}")

    arrays = {}
    for e in doc.get("arrays", []):
        name, dtype, shape = e["name"], e["dtype"], tuple(e["shape"])
        offset, nbytes = e["offset"], e["nbytes"]
        if dtype not in _DTYPES:
            raise FormatError(f"{path}: array {name!r} has unsupported dtype {dtype!r}")
        np_dtype = _DTYPES[dtype]
        expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        if nbytes != expected:
            raise ShapeError(f"{path}: array {name!r} nbytes {nbytes} != shape {shape} requires {expected}")
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: array {name!r} payload overruns file")
        flat = np.frombuffer(raw, dtype=np_dtype, count=expected // np_dtype.itemsize, offset=offset)
        arrays[name] = flat.reshape(shape).copy()
    return fmt, arrays, doc.get("meta", {})
