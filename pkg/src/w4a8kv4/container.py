"""QTZ1 tensor container.

Layout (all integers little-endian)::

    b"QTZ1" | u64 manifest length | manifest (UTF-8 JSON) | zero pad | payload

The payload starts at the first 64-byte boundary after the manifest. Every
tensor's ``offset`` is relative to the payload start and is a multiple of 64;
gaps are zero-filled. The manifest is ``{"meta": {...}, "tensors": [...]}``
serialized with sorted keys and no whitespace, each tensor entry holding
``name``, ``dtype``, ``shape``, ``offset`` and ``length`` (bytes).

dtypes: ``f64``; ``f16-bits`` (binary16 bit patterns, read back as
``float16``); ``u8``; ``u4-packed`` (values 0..15 in C order, two per byte,
first value in the low nibble); ``i8``; ``i32``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"QTZ1"
ALIGN = 64
_NUMPY = {"f64": "<f8", "f16-bits": "<f2", "u8": "u1", "i8": "i1", "i32": "<i4"}
DTYPES = tuple(_NUMPY) + ("u4-packed",)


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _encode_tensor(dtype: str, arr) -> bytes:
    arr = np.asarray(arr)
    if dtype == "u4-packed":
        flat = arr.reshape(-1).astype(np.int64)
        if flat.size and (flat.min() < 0 or flat.max() > 15):
            raise FormatError("u4-packed values must lie in [0, 15]")
        if flat.size % 2:
            flat = np.append(flat, 0)
        return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()
    if dtype not in _NUMPY:
        raise FormatError(f"unknown dtype {dtype!r}")
    target = np.dtype(_NUMPY[dtype])
    if target.kind in "iu":
        info = np.iinfo(target)
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise FormatError(f"values out of range for {dtype}")
    elif dtype == "f16-bits" and arr.size and not np.array_equal(arr.astype(np.float16).astype(np.float64), arr.astype(np.float64)):
        raise FormatError("values are not binary16-representable")
    return np.ascontiguousarray(arr.astype(target)).tobytes()


def _decode_tensor(dtype: str, shape, raw: bytes) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    if dtype == "u4-packed":
        want = (n + 1) // 2
    elif dtype in _NUMPY:
        want = n * np.dtype(_NUMPY[dtype]).itemsize
    else:
        raise FormatError(f"unknown dtype {dtype!r}")
    if len(raw) != want:
        raise FormatError(f"{dtype} tensor of shape {list(shape)} needs {want} bytes, manifest says {len(raw)}")
    if dtype == "u4-packed":
        b = np.frombuffer(raw, dtype=np.uint8)
        out = np.empty(2 * b.size, dtype=np.uint8)
        out[0::2] = b & 0x0F
        out[1::2] = b >> 4
        return out[:n].reshape(shape)
    return np.frombuffer(raw, dtype=_NUMPY[dtype]).copy().reshape(shape)


def encode(tensors, meta: dict | None = None) -> bytes:
    """``tensors`` is a sequence of ``(name, dtype, array)``."""
    entries, blobs, offset = [], [], 0
    seen = set()
    for name, dtype, arr in tensors:
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        blob = _encode_tensor(dtype, arr)
        entries.append({"name": name, "dtype": dtype, "shape": list(np.shape(arr)),
                        "offset": offset, "length": len(blob)})
        blobs.append(blob + bytes(_align(len(blob)) - len(blob)))
        offset += _align(len(blob))
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True,
                          separators=(",", ":")).encode()
    head = MAGIC + struct.pack("<Q", len(manifest)) + manifest
    return head + bytes(_align(len(head)) - len(head)) + b"".join(blobs)


def decode(data: bytes):
    """Returns ``(tensors, meta)``; ``tensors`` maps name to array in file order."""
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("not a QTZ1 container")
    (mlen,) = struct.unpack("<Q", data[4:12])
    if 12 + mlen > len(data):
        raise FormatError("manifest runs past end of file")
    try:
        manifest = json.loads(data[12:12 + mlen])
    except ValueError as exc:
        raise FormatError(f"bad manifest: {exc}") from None
    base = _align(12 + mlen)
    tensors, spans = {}, []
    for e in manifest.get("tensors", []):
        try:
            name, dtype, shape, off, length = e["name"], e["dtype"], tuple(e["shape"]), e["offset"], e["length"]
        except KeyError as exc:
            raise FormatError(f"manifest entry missing {exc}") from None
        if off % ALIGN or off < 0 or base + off + length > len(data):
            raise FormatError(f"tensor {name!r} is misaligned or out of bounds")
        spans.append((off, off + length, name))
        tensors[name] = _decode_tensor(dtype, shape, data[base + off: base + off + length])
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise FormatError(f"tensors {a!r} and {b!r} overlap")
    return tensors, manifest.get("meta", {})


def write(path, tensors, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def read(path):
    return decode(Path(path).read_bytes())
