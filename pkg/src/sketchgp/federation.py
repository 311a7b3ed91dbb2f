"""Federated construction of Gaussian sketches across private data centers.

Each center j holds rows [offset_j, offset_j + n_j) of the global ordering.
It regenerates only its own column block Phi^(j) from the shared seed and
releases Phi^(j) y^(j), Phi^(j) X^(j) and Phi^(j) 1.  The coordinator sums the
partial products in ascending center order.

Message file layout (all integers little-endian):

    bytes  0..3    magic  b"SKFM"
    bytes  4..7    version (uint32)
    bytes  8..63   center_id, h, m, S, q, n_j, offset  (7 x int64)
    payload        partial_y (m x S), partial_X (m x q), partial_ones (m),
                   row-major float64
    trailer        CRC-64/XZ of header + payload (uint64)

CRC-64/XZ: reflected polynomial 0xC96C5795D7870F42 (ECMA-182), init and
final xor 0xFFFFFFFFFFFFFFFF; check value for b"123456789" is
0x995DC9BBDF1939FA.  Over TCP a message travels as one frame: a 4-byte
big-endian length followed by exactly the file bytes.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FunctionalDataset
from .sketch import SketchedData, gen_gaussian_sketch

MESSAGE_MAGIC = b"SKFM"
MESSAGE_VERSION = 1
_MSG_HEADER = struct.Struct("<4sI7q")
assert _MSG_HEADER.size == 64
_CRC = struct.Struct("<Q")


class ProtocolError(RuntimeError):
    """Inconsistent, missing, duplicated or corrupted center messages."""


def _crc_table() -> list[int]:
    poly = 0xC96C5795D7870F42
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _crc_table()


def crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    table = _TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class CenterShard:
    center_id: int
    locations: np.ndarray
    local_attrs: np.ndarray
    responses: np.ndarray
    column_offset: int

    @property
    def n_j(self) -> int:
        return self.responses.shape[0]


def split_dataset(ds: FunctionalDataset, sizes) -> list[CenterShard]:
    """Contiguous row split into shards with the given sizes (for testing and demos)."""
    sizes = [int(s) for s in sizes]
    if sum(sizes) != ds.n or min(sizes) < 0:
        raise ValueError(f"shard sizes {sizes} do not sum to n={ds.n}")
    shards, off = [], 0
    for j, nj in enumerate(sizes):
        sl = slice(off, off + nj)
        shards.append(CenterShard(j, ds.locations[sl], ds.local_attrs[sl], ds.responses[sl], off))
        off += nj
    return shards


@dataclass(frozen=True)
class PartialSketchMessage:
    center_id: int
    sketch_id: int
    m: int
    S: int
    q: int
    n_j: int
    offset: int
    partial_y: np.ndarray
    partial_X: np.ndarray
    partial_ones: np.ndarray
    checksum: int | None = None

    def _header_payload(self) -> bytes:
        head = _MSG_HEADER.pack(MESSAGE_MAGIC, MESSAGE_VERSION, self.center_id, self.sketch_id,
                                self.m, self.S, self.q, self.n_j, self.offset)
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (self.partial_y, self.partial_X, self.partial_ones)
        )
        return head + body

    def compute_checksum(self) -> int:
        return crc64(self._header_payload())

    def to_bytes(self) -> bytes:
        raw = self._header_payload()
        crc = crc64(raw) if self.checksum is None else self.checksum
        return raw + _CRC.pack(crc)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PartialSketchMessage":
        if len(raw) < 64 + 8:
            raise ProtocolError("message truncated")
        magic, version, cid, h, m, S, q, nj, off = _MSG_HEADER.unpack(raw[:64])
        if magic != MESSAGE_MAGIC:
            raise ProtocolError(f"bad message magic {magic!r}")
        if version != MESSAGE_VERSION:
            raise ProtocolError(f"unsupported message version {version}")
        expected = 64 + 8 * (m * S + m * q + m) + 8
        if len(raw) != expected:
            raise ProtocolError(f"center {cid}: message is {len(raw)} bytes, expected {expected}")
        vals = np.frombuffer(raw[64:-8], dtype="<f8").astype(np.float64)
        y = vals[: m * S].reshape(m, S)
        x = vals[m * S : m * S + m * q].reshape(m, q)
        ones = vals[m * S + m * q :]
        (crc,) = _CRC.unpack(raw[-8:])
        return cls(cid, h, m, S, q, nj, off, y, x, ones, crc)

    def verify(self) -> bool:
        return self.checksum is not None and self.checksum == self.compute_checksum()


def center_compute_partial(shard: CenterShard, m: int, n: int, seed: int,
                           sketch_id: int = 0) -> PartialSketchMessage:
    """Local products with this center's column block of the shared sketch."""
    if shard.column_offset < 0 or shard.column_offset + shard.n_j > n:
        raise ProtocolError(
            f"center {shard.center_id}: rows [{shard.column_offset}, "
            f"{shard.column_offset + shard.n_j}) do not fit in global n={n}"
        )
    S = shard.responses.shape[1]
    q = shard.local_attrs.shape[1]
    phi = gen_gaussian_sketch(m, n, seed)
    block = phi.columns(shard.column_offset, shard.column_offset + shard.n_j)
    msg = PartialSketchMessage(
        shard.center_id, sketch_id, m, S, q, shard.n_j, shard.column_offset,
        block @ shard.responses, block @ shard.local_attrs, block @ np.ones(shard.n_j),
    )
    return PartialSketchMessage(**{**msg.__dict__, "checksum": msg.compute_checksum()})


def aggregate_partials(messages, global_attrs, expected_centers=None, n: int | None = None) -> SketchedData:
    """Sum partial sketches in ascending center order.

    ``expected_centers``, when given, must match the set of center ids
    exactly; ``n``, when given, must equal the total row count.
    """
    messages = list(messages)
    if not messages:
        raise ProtocolError("no center messages")
    ids = [msg.center_id for msg in messages]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ProtocolError(f"duplicate center_id(s): {dupes}")
    if expected_centers is not None:
        missing = sorted(set(expected_centers) - set(ids))
        if missing:
            raise ProtocolError(f"missing message(s) from center(s): {missing}")
        extra = sorted(set(ids) - set(expected_centers))
        if extra:
            raise ProtocolError(f"unexpected center(s): {extra}")
    for msg in messages:
        if not msg.verify():
            raise ProtocolError(f"checksum failure in message from center {msg.center_id}")
    ordered = sorted(messages, key=lambda msg: msg.center_id)
    first = ordered[0]
    for msg in ordered[1:]:
        if (msg.sketch_id, msg.m, msg.S, msg.q) != (first.sketch_id, first.m, first.S, first.q):
            raise ProtocolError(
                f"center {msg.center_id} disagrees on (h, m, S, q): "
                f"{(msg.sketch_id, msg.m, msg.S, msg.q)} vs {(first.sketch_id, first.m, first.S, first.q)}"
            )
    spans = sorted((msg.offset, msg.offset + msg.n_j, msg.center_id) for msg in ordered if msg.n_j)
    total = sum(msg.n_j for msg in ordered)
    cursor = 0
    for lo, hi, cid in spans:
        if lo != cursor:
            raise ProtocolError(f"center {cid} starts at row {lo}, expected {cursor} (gap or overlap)")
        cursor = hi
    if n is not None and total != n:
        raise ProtocolError(f"centers cover {total} rows but global n={n}")

    y = np.zeros((first.m, first.S))
    x = np.zeros((first.m, first.q))
    ones = np.zeros(first.m)
    for msg in ordered:
        y += msg.partial_y
        x += msg.partial_X
        ones += msg.partial_ones
    return SketchedData(y, x, ones, global_attrs, total / first.m, first.sketch_id)


# ----------------------------------------------------------------- transport


def message_path(directory, center_id: int, sketch_id: int) -> Path:
    return Path(directory) / f"center{center_id:03d}_sketch{sketch_id:03d}.msg"


def write_message(msg: PartialSketchMessage, path) -> None:
    Path(path).write_bytes(msg.to_bytes())


def read_message(path) -> PartialSketchMessage:
    return PartialSketchMessage.from_bytes(Path(path).read_bytes())


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks, got = [], 0
    while got < count:
        chunk = sock.recv(min(count - got, 1 << 20))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def send_frame(sock: socket.socket, msg: PartialSketchMessage) -> None:
    raw = msg.to_bytes()
    sock.sendall(struct.pack(">I", len(raw)) + raw)


def recv_frame(sock: socket.socket) -> PartialSketchMessage:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    return PartialSketchMessage.from_bytes(_recv_exact(sock, length))


def collect_frames(server: socket.socket, count: int, timeout: float = 30.0) -> list[PartialSketchMessage]:
    """Accept connections on a listening socket until ``count`` frames arrive.

    A connection may carry several frames; it ends when the peer closes.
    """
    server.settimeout(timeout)
    out = []
    while len(out) < count:
        conn, _ = server.accept()
        with conn:
            conn.settimeout(timeout)
            while len(out) < count:
                head = conn.recv(4, socket.MSG_WAITALL)
                if not head:
                    break
                if len(head) < 4:
                    raise ProtocolError("connection closed mid-frame")
                (length,) = struct.unpack(">I", head)
                out.append(PartialSketchMessage.from_bytes(_recv_exact(conn, length)))
    return out


def send_to(host: str, port: int, messages) -> None:
    with socket.create_connection((host, port)) as sock:
        for msg in messages:
            send_frame(sock, msg)
