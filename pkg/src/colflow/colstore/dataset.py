"""Opening and reading columnar files over local or remote transports.

URIs: a plain filesystem path opens locally; ``colsrv://host:port/relpath``
opens a session against a data server. Each handle owns one transport
connection and one ReadAccount; opening reads only the header and footer.
Reads are chunk-granular: one transport read per needed chunk, no
coalescing, so the account's chunk_bytes is exactly the sum of the fetched
chunks' byte lengths.
"""

from __future__ import annotations

import os
import socket
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import server as srv
from .format import (
    FOOTER_MAGIC,
    HEADER_SIZE,
    MAGIC,
    TAIL_SIZE,
    VERSION,
    ClusterInfo,
    ColumnSchema,
    Dtype,
    FormatError,
    decode_chunk,
    decode_footer,
)

REMOTE_SCHEME = "colsrv://"


class TransportError(Exception):
    """Connection or protocol failure while talking to a data server."""


@dataclass
class ReadAccount:
    """Monotone counters for one reader session."""

    bytes_read: int = 0
    read_calls: int = 0
    chunk_bytes: int = 0  # data bytes only (chunk payloads, no metadata)


class LocalTransport:
    def __init__(self, path: str):
        try:
            self._f = open(path, "rb")
        except FileNotFoundError:
            raise FileNotFoundError(f"no such file: {path}") from None
        self._size = os.fstat(self._f.fileno()).st_size

    def size(self) -> int:
        return self._size

    def read(self, offset: int, length: int) -> bytes:
        self._f.seek(offset)
        return self._f.read(length)

    def close(self) -> None:
        self._f.close()


class RemoteTransport:
    """Client side of the data-server protocol; one session per instance."""

    def __init__(self, host: str, port: int, path: str):
        try:
            self._sock = socket.create_connection((host, port), timeout=30)
        except OSError as e:
            raise TransportError(f"cannot connect to data server {host}:{port}: {e}") from None
        self._fid, self._size = struct.unpack("<QQ", self._request(srv.OP_OPEN, srv.pack_str(path)))

    def _request(self, opcode: int, payload: bytes) -> bytes:
        try:
            srv.send_frame(self._sock, opcode, payload)
            frame = srv.recv_frame(self._sock)
        except (ConnectionError, OSError) as e:
            raise TransportError(f"data server connection failed: {e}") from None
        if frame is None:
            raise TransportError("data server closed the connection")
        reply_op, reply = frame
        if reply_op == srv.OP_ERROR:
            (code,) = struct.unpack_from("<H", reply, 0)
            message, _ = srv.unpack_str(reply, 2)
            raise TransportError(f"data server error {code}: {message}")
        if reply_op != opcode:
            raise TransportError(f"unexpected reply opcode {reply_op} to request {opcode}")
        return reply

    def size(self) -> int:
        return self._size

    def read(self, offset: int, length: int) -> bytes:
        return self._request(srv.OP_READ, struct.pack("<QQI", self._fid, offset, length))

    def session_metrics(self) -> tuple[int, int]:
        reply = self._request(srv.OP_METRICS, bytes([srv.METRICS_SESSION]))
        return struct.unpack("<QQ", reply)

    def server_metrics(self) -> tuple[int, int]:
        reply = self._request(srv.OP_METRICS, bytes([srv.METRICS_GLOBAL]))
        return struct.unpack("<QQ", reply)

    def close(self) -> None:
        try:
            self._request(srv.OP_CLOSE, struct.pack("<Q", self._fid))
        except TransportError:
            pass
        self._sock.close()


def parse_remote_uri(uri: str) -> tuple[str, int, str]:
    rest = uri[len(REMOTE_SCHEME) :]
    hostport, _, path = rest.partition("/")
    host, _, port = hostport.partition(":")
    if not host or not port or not path:
        raise TransportError(f"malformed remote URI: {uri}")
    return host, int(port), path


def server_totals(address: str) -> tuple[int, int]:
    """Global (bytes_served, read_calls) of the data server at host:port.

    The query itself moves no file data, so polling it never perturbs the
    counters it reports.
    """
    host, _, port = address.rpartition(":")
    with socket.create_connection((host, int(port))) as sock:
        srv.send_frame(sock, srv.OP_METRICS, bytes([srv.METRICS_GLOBAL]))
        frame = srv.recv_frame(sock)
        if frame is None:
            raise TransportError(f"data server {address} closed during metrics query")
        opcode, payload = frame
        if opcode != srv.OP_METRICS:
            raise TransportError(f"unexpected reply opcode {opcode} to metrics query")
        served, calls = struct.unpack("<QQ", payload)
        return served, calls


@dataclass
class VectorData:
    """A vector column's slice of a batch: per-entry lengths plus packed values."""

    lengths: np.ndarray
    values: np.ndarray

    def tolists(self) -> list[list]:
        out: list[list] = []
        flat = self.values.tolist()
        pos = 0
        for n in self.lengths.tolist():
            out.append(flat[pos : pos + n])
            pos += n
        return out


@dataclass
class ColumnBatch:
    """Decoded values of the requested columns for one cluster overlap."""

    entry_start: int
    entry_count: int
    columns: dict[str, np.ndarray | VectorData]


class DatasetHandle:
    """An opened columnar file: immutable metadata plus one reader session."""

    def __init__(self, uri: str, transport, schema, total_entries, clusters, account: ReadAccount):
        self.uri = uri
        self.transport = "remote" if isinstance(transport, RemoteTransport) else "local"
        self._transport = transport
        self.schema: tuple[ColumnSchema, ...] = schema
        self.total_entries: int = total_entries
        self.clusters: tuple[ClusterInfo, ...] = clusters
        self.account = account
        self._col_index = {c.name: i for i, c in enumerate(schema)}

    def schema_types(self) -> dict[str, Dtype]:
        return {c.name: c.dtype for c in self.schema}

    def column_chunk_bytes(self, columns) -> int:
        """Total chunk bytes of the given columns, computed from the footer."""
        idx = [self._col_index[name] for name in columns]
        return sum(cl.chunks[i].length for cl in self.clusters for i in idx)

    def read_range(self, columns, begin: int, end: int):
        return read_range(self, columns, begin, end)

    def close(self) -> None:
        self._transport.close()

    def __enter__(self) -> "DatasetHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _tracked_read(transport, account: ReadAccount, offset: int, length: int) -> bytes:
    data = transport.read(offset, length)
    account.bytes_read += len(data)
    account.read_calls += 1
    return data


def open_dataset(uri: str) -> DatasetHandle:
    """Open a columnar file, reading only its header and footer."""
    if uri.startswith(REMOTE_SCHEME):
        host, port, path = parse_remote_uri(uri)
        transport = RemoteTransport(host, port, path)
    else:
        transport = LocalTransport(uri)

    account = ReadAccount()
    try:
        size = transport.size()
        if size < HEADER_SIZE + TAIL_SIZE:
            raise FormatError(f"{uri}: file too small to be a columnar file")
        header = _tracked_read(transport, account, 0, HEADER_SIZE)
        if header[:4] != MAGIC:
            raise FormatError(f"{uri}: bad magic")
        if header[4] != VERSION:
            raise FormatError(f"{uri}: unsupported version {header[4]}")
        tail = _tracked_read(transport, account, size - TAIL_SIZE, TAIL_SIZE)
        if tail[12:] != FOOTER_MAGIC:
            raise FormatError(f"{uri}: bad footer magic")
        footer_offset, footer_crc = struct.unpack("<QI", tail[:12])
        if not HEADER_SIZE <= footer_offset <= size - TAIL_SIZE:
            raise FormatError(f"{uri}: truncated footer")
        body = _tracked_read(transport, account, footer_offset, size - TAIL_SIZE - footer_offset)
        if zlib.crc32(body) != footer_crc:
            raise FormatError(f"{uri}: footer CRC mismatch")
        schema, total_entries, clusters = decode_footer(body)
        pos = 0
        for cl in clusters:
            if cl.entry_start != pos or cl.entry_count < 1:
                raise FormatError(f"{uri}: clusters not contiguous")
            pos += cl.entry_count
        if pos != total_entries:
            raise FormatError(f"{uri}: cluster entry counts do not sum to total")
    except Exception:
        transport.close()
        raise
    return DatasetHandle(uri, transport, schema, total_entries, clusters, account)


def read_range(handle: DatasetHandle, columns, begin: int, end: int):
    """Yield one trimmed ColumnBatch per cluster overlapping [begin, end).

    Only the requested columns' chunks inside overlapped clusters are
    fetched; the handle's account grows by exactly those chunk lengths.
    """
    names = list(columns)
    for name in names:
        if name not in handle._col_index:
            raise KeyError(f"unknown column: {name}")
    if not 0 <= begin <= end <= handle.total_entries:
        raise ValueError(f"range [{begin}, {end}) outside [0, {handle.total_entries})")
    if begin == end:
        return

    dtypes = handle.schema_types()
    for cl in handle.clusters:
        cl_end = cl.entry_start + cl.entry_count
        if cl_end <= begin or cl.entry_start >= end:
            continue
        lo = max(begin, cl.entry_start) - cl.entry_start
        hi = min(end, cl_end) - cl.entry_start
        decoded: dict[str, np.ndarray | VectorData] = {}
        for name in names:
            ref = cl.chunks[handle._col_index[name]]
            raw = _tracked_read(handle._transport, handle.account, ref.offset, ref.length)
            if len(raw) != ref.length:
                raise TransportError(
                    f"short read: wanted {ref.length} bytes at {ref.offset}, got {len(raw)}"
                )
            handle.account.chunk_bytes += len(raw)
            if zlib.crc32(raw) != ref.crc32:
                raise FormatError(f"{handle.uri}: chunk CRC mismatch in column {name}")
            data = decode_chunk(dtypes[name], raw, cl.entry_count)
            if dtypes[name].is_vector:
                lengths, values = data
                starts = np.zeros(len(lengths) + 1, dtype=np.int64)
                np.cumsum(lengths, out=starts[1:])
                decoded[name] = VectorData(lengths[lo:hi], values[starts[lo] : starts[hi]])
            else:
                decoded[name] = data[lo:hi]
        yield ColumnBatch(cl.entry_start + lo, hi - lo, decoded)
