"""Little-endian binary containers shared by the on-disk formats.

Every file starts with a 64-byte header: an 8-byte magic followed by seven
little-endian int64 slots.  The meaning of the slots is format specific;
unused slots are zero.  Payload matrices follow as row-major float64.
Some formats append a UTF-8 JSON metadata block whose byte length is stored
in one of the header slots.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

HEADER_SIZE = 64
_SLOTS = 7
_HEADER = struct.Struct("<8s7q")
assert _HEADER.size == HEADER_SIZE


class FormatError(ValueError):
    """Raised when a binary file does not match its declared layout."""


def pack_header(magic: bytes, *slots: int) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    if len(slots) > _SLOTS:
        raise ValueError(f"at most {_SLOTS} header slots")
    values = list(slots) + [0] * (_SLOTS - len(slots))
    return _HEADER.pack(magic, *values)


def unpack_header(raw: bytes, magic: bytes) -> tuple[int, ...]:
    if len(raw) < HEADER_SIZE:
        raise FormatError("truncated header")
    got, *slots = _HEADER.unpack(raw[:HEADER_SIZE])
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    return tuple(slots)


def write_matrix(fh: BinaryIO, a: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))


def read_matrix(fh: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError(f"truncated payload: wanted {count} float64 values")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def encode_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, default=_json_default).encode("utf-8")


def decode_meta(raw: bytes) -> dict:
    return json.loads(raw.decode("utf-8"))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_labeled_matrix(path, magic: bytes, matrix: np.ndarray, meta: dict) -> None:
    """Header (version, rows, cols, meta length) + JSON meta + matrix."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    blob = encode_meta(meta)
    with open(path, "wb") as fh:
        fh.write(pack_header(magic, 1, matrix.shape[0], matrix.shape[1], len(blob)))
        fh.write(blob)
        write_matrix(fh, matrix)


def read_labeled_matrix(path, magic: bytes) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        version, rows, cols, meta_len, *_ = unpack_header(fh.read(HEADER_SIZE), magic)
        if version != 1:
            raise FormatError(f"unsupported version {version}")
        meta = decode_meta(fh.read(meta_len))
        matrix = read_matrix(fh, (rows, cols))
        if fh.read(1):
            raise FormatError("trailing bytes after payload")
    return matrix, meta
