"""Bit-exact binary formats for dense tensors (QTF1) and named tensor containers (QTS1).

All integers are little-endian and fixed-width, so files round-trip
byte-identically across platforms.  Only float32 and int32 payloads are
storable; non-finite float values are rejected at this boundary in both
directions.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import TensorFormatError

TENSOR_MAGIC = b"QTF1"
SET_MAGIC = b"QTS1"
FORMAT_VERSION = 1

DTYPE_F32 = 0
DTYPE_I32 = 1

_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_I32: np.dtype("<i4")}
_CODES = {np.dtype("float32"): DTYPE_F32, np.dtype("int32"): DTYPE_I32}

# sanity cap when parsing headers; anything larger is treated as corruption
_MAX_NDIM = 32

PathLike = str | Path
Entries = Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]


def _validate_array(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise TensorFormatError(
            f"only float32 and int32 tensors are storable, got dtype {arr.dtype}"
        )
    if arr.ndim < 1:
        raise TensorFormatError("tensors must have at least one dimension")
    if any(d < 1 for d in arr.shape):
        raise TensorFormatError(f"all dimensions must be >= 1, got shape {arr.shape}")
    if arr.dtype == np.float32 and not np.isfinite(arr).all():
        raise TensorFormatError("refusing to store non-finite float values")
    return np.ascontiguousarray(arr)


def _encode_record(arr: np.ndarray) -> bytes:
    """Version + dtype + ndim + dims + payload (everything after the file magic)."""
    arr = _validate_array(arr)
    code = _CODES[arr.dtype]
    head = struct.pack("<III", FORMAT_VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + arr.astype(_DTYPES[code], copy=False).tobytes(order="C")


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Canonical single-tensor file encoding; also used for content digests."""
    return TENSOR_MAGIC + _encode_record(arr)


def record_size(shape: tuple[int, ...]) -> int:
    """Exact QTF1 file size in bytes for a tensor of the given shape (4-byte items)."""
    count = 1
    for d in shape:
        count *= d
    return 4 + 4 + 4 + 4 + 8 * len(shape) + 4 * count


class _Cursor:
    def __init__(self, buf: bytes, origin: str):
        self.buf = buf
        self.pos = 0
        self.origin = origin

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TensorFormatError(
                f"{self.origin}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _decode_record(cur: _Cursor) -> np.ndarray:
    version, code, ndim = struct.unpack("<III", cur.take(12, "record header"))
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{cur.origin}: unsupported format version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"{cur.origin}: unknown dtype code {code}")
    if not 1 <= ndim <= _MAX_NDIM:
        raise TensorFormatError(f"{cur.origin}: implausible rank {ndim}")
    dims = struct.unpack(f"<{ndim}Q", cur.take(8 * ndim, "dimensions"))
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"{cur.origin}: zero-sized dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    payload = cur.take(4 * count, "tensor payload")
    arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(dims).copy()
    if arr.dtype == np.float32 and not np.isfinite(arr).all():
        raise TensorFormatError(f"{cur.origin}: non-finite value in payload")
    return arr


def write_tensor(path: PathLike, arr: np.ndarray) -> None:
    """Write one tensor as a QTF1 file."""
    Path(path).write_bytes(tensor_bytes(arr))


def read_tensor(path: PathLike) -> np.ndarray:
    """Read a QTF1 file back into a float32 or int32 array."""
    path = Path(path)
    cur = _Cursor(path.read_bytes(), str(path))
    magic = cur.take(4, "file magic")
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    arr = _decode_record(cur)
    if not cur.done():
        raise TensorFormatError(f"{path}: {len(cur.buf) - cur.pos} unexpected trailing bytes")
    return arr


def _normalize_entries(entries: Entries) -> list[tuple[str, np.ndarray]]:
    pairs = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    seen: set[str] = set()
    for name, _ in pairs:
        if not isinstance(name, str):
            raise TensorFormatError(f"entry names must be strings, got {type(name).__name__}")
        if name in seen:
            raise TensorFormatError(f"duplicate entry name {name!r}")
        seen.add(name)
    return pairs


def write_set(path: PathLike, entries: Entries) -> None:
    """Write an ordered named-tensor container as a QTS1 file."""
    pairs = _normalize_entries(entries)
    chunks = [SET_MAGIC, struct.pack("<I", len(pairs))]
    for name, arr in pairs:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(_encode_record(arr))
    Path(path).write_bytes(b"".join(chunks))


def read_set(path: PathLike) -> dict[str, np.ndarray]:
    """Read a QTS1 container, preserving entry order."""
    path = Path(path)
    cur = _Cursor(path.read_bytes(), str(path))
    magic = cur.take(4, "file magic")
    if magic != SET_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}, expected {SET_MAGIC!r}")
    (count,) = struct.unpack("<I", cur.take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", cur.take(4, f"entry {i} name length"))
        try:
            name = cur.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TensorFormatError(f"{path}: entry {i} name is not valid UTF-8") from exc
        if name in out:
            raise TensorFormatError(f"{path}: duplicate entry name {name!r}")
        out[name] = _decode_record(cur)
    if not cur.done():
        raise TensorFormatError(f"{path}: {len(cur.buf) - cur.pos} unexpected trailing bytes")
    return out
