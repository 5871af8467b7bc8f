"""Scheduler/worker wire protocol.

Frame layout, little-endian throughout:

    u32 length   == payload size + 4
    u16 kind
    u16 version  == 1
    payload

Strings are u16-length-prefixed UTF-8 (cap 64 KiB). Version mismatches and
unknown kinds are hard errors; the connection must be dropped. Frames are
self-delimiting, so a FrameReader fed arbitrary chunk boundaries yields the
same message sequence.

Kinds 1..7 form the worker channel (REGISTER, GRAPH, TASK, RESULT, FAIL,
HEARTBEAT, SHUTDOWN). Kinds 8..10 form the client channel (SUBMIT,
RUN_DONE, RUN_FAIL): a client submits a planned run and eventually receives
the merged result with its per-task records.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

from .engine import EntryRange, Mode, PartialResult
from .metrics import JobRecord

PROTO_VERSION = 1

MSG_REGISTER = 1
MSG_GRAPH = 2
MSG_TASK = 3
MSG_RESULT = 4
MSG_FAIL = 5
MSG_HEARTBEAT = 6
MSG_SHUTDOWN = 7
MSG_SUBMIT = 8
MSG_RUN_DONE = 9
MSG_RUN_FAIL = 10


class ProtoError(Exception):
    """Malformed frame or message; the connection is no longer trustworthy."""


@dataclass(frozen=True)
class Register:
    name: str
    slots: int


@dataclass(frozen=True)
class Graph:
    graph_id: str
    document: str


@dataclass(frozen=True)
class Task:
    task_id: int
    graph_id: str
    entry_range: EntryRange
    mode: Mode
    attempt: int = 1
    payload_uri: str = ""  # junk blob fetched before work, "" for none
    payload_bytes: int = 0
    result_file: str = ""  # where to write results instead of replying inline


@dataclass(frozen=True)
class Result:
    task_id: int
    t_total: float
    partial: PartialResult = field(compare=False)

    def __eq__(self, other):
        if not isinstance(other, Result):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.t_total == other.t_total
            and self.partial == other.partial
        )


@dataclass(frozen=True)
class Fail:
    task_id: int
    error: str


@dataclass(frozen=True)
class Heartbeat:
    name: str


@dataclass(frozen=True)
class Shutdown:
    pass


@dataclass(frozen=True)
class Submit:
    """A run request.

    Two flavors: tasks empty means the scheduler partitions the document's
    dataset itself (factor x live workers); a non-empty task list is
    dispatched exactly as given (the baseline's one-job-per-file runs).
    """

    run_id: str
    document: str
    max_retries: int = 2
    factor: int = 3
    tasks: tuple[Task, ...] = ()


@dataclass(frozen=True)
class RunDone:
    run_id: str
    wall_time: float
    partial: PartialResult = field(compare=False)
    records: tuple[JobRecord, ...] = ()
    scheduler_bytes: int = 0  # metadata reads done while planning

    def __eq__(self, other):
        if not isinstance(other, RunDone):
            return NotImplemented
        return (
            self.run_id == other.run_id
            and self.wall_time == other.wall_time
            and self.partial == other.partial
            and self.records == other.records
            and self.scheduler_bytes == other.scheduler_bytes
        )


@dataclass(frozen=True)
class RunFail:
    run_id: str
    error: str


Message = (
    Register | Graph | Task | Result | Fail | Heartbeat | Shutdown | Submit | RunDone | RunFail
)

_KIND_OF = {
    Register: MSG_REGISTER,
    Graph: MSG_GRAPH,
    Task: MSG_TASK,
    Result: MSG_RESULT,
    Fail: MSG_FAIL,
    Heartbeat: MSG_HEARTBEAT,
    Shutdown: MSG_SHUTDOWN,
    Submit: MSG_SUBMIT,
    RunDone: MSG_RUN_DONE,
    RunFail: MSG_RUN_FAIL,
}


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtoError(f"string too long for wire format: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    if off + 2 > len(buf):
        raise ProtoError("truncated string length")
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    if off + n > len(buf):
        raise ProtoError("truncated string body")
    return buf[off : off + n].decode("utf-8"), off + n


def _pack_task(t: Task) -> bytes:
    return b"".join(
        (
            struct.pack("<I", t.task_id),
            _pack_str(t.graph_id),
            _pack_str(t.entry_range.file),
            struct.pack("<QQ", t.entry_range.begin, t.entry_range.end),
            struct.pack("<B", t.mode.kind),
            _pack_str(t.mode.universe),
            struct.pack("<B", t.attempt),
            _pack_str(t.payload_uri),
            struct.pack("<Q", t.payload_bytes),
            _pack_str(t.result_file),
        )
    )


def _unpack_task(buf: bytes, off: int) -> tuple[Task, int]:
    (task_id,) = struct.unpack_from("<I", buf, off)
    off += 4
    graph_id, off = _unpack_str(buf, off)
    file, off = _unpack_str(buf, off)
    begin, end = struct.unpack_from("<QQ", buf, off)
    off += 16
    mode_kind = buf[off]
    off += 1
    universe, off = _unpack_str(buf, off)
    attempt = buf[off]
    off += 1
    payload_uri, off = _unpack_str(buf, off)
    (payload_bytes,) = struct.unpack_from("<Q", buf, off)
    off += 8
    result_file, off = _unpack_str(buf, off)
    return (
        Task(
            task_id,
            graph_id,
            EntryRange(file, begin, end),
            Mode(mode_kind, universe),
            attempt,
            payload_uri,
            payload_bytes,
            result_file,
        ),
        off,
    )


def _pack_record(r: JobRecord) -> bytes:
    return b"".join(
        (
            struct.pack("<I", r.task_id),
            _pack_str(r.worker),
            struct.pack("<QddQQB", r.events, r.t_total, r.t_loop, r.bytes_read, r.chunk_bytes, r.attempt),
            _pack_str(r.phase),
            struct.pack("<BQ", r.passes, r.mem_peak),
        )
    )


def _unpack_record(buf: bytes, off: int) -> tuple[JobRecord, int]:
    (task_id,) = struct.unpack_from("<I", buf, off)
    off += 4
    worker, off = _unpack_str(buf, off)
    events, t_total, t_loop, bytes_read, chunk_bytes, attempt = struct.unpack_from("<QddQQB", buf, off)
    off += 41
    phase, off = _unpack_str(buf, off)
    passes, mem_peak = struct.unpack_from("<BQ", buf, off)
    off += 9
    return (
        JobRecord(task_id, worker, events, t_total, t_loop, bytes_read, chunk_bytes, attempt, phase, passes, mem_peak),
        off,
    )


def _encode_payload(msg: Message) -> bytes:
    if isinstance(msg, Register):
        return _pack_str(msg.name) + struct.pack("<H", msg.slots)
    if isinstance(msg, Graph):
        return _pack_str(msg.graph_id) + _pack_str(msg.document)
    if isinstance(msg, Task):
        return _pack_task(msg)
    if isinstance(msg, Result):
        return struct.pack("<Id", msg.task_id, msg.t_total) + msg.partial.to_bytes()
    if isinstance(msg, Fail):
        return struct.pack("<I", msg.task_id) + _pack_str(msg.error)
    if isinstance(msg, Heartbeat):
        return _pack_str(msg.name)
    if isinstance(msg, Shutdown):
        return b""
    if isinstance(msg, Submit):
        out = _pack_str(msg.run_id) + _pack_str(msg.document)
        out += struct.pack("<HHI", msg.max_retries, msg.factor, len(msg.tasks))
        for t in msg.tasks:
            out += _pack_task(t)
        return out
    if isinstance(msg, RunDone):
        out = _pack_str(msg.run_id) + struct.pack("<dQ", msg.wall_time, msg.scheduler_bytes)
        out += msg.partial.to_bytes()
        out += struct.pack("<I", len(msg.records))
        for r in msg.records:
            out += _pack_record(r)
        return out
    if isinstance(msg, RunFail):
        return _pack_str(msg.run_id) + _pack_str(msg.error)
    raise ProtoError(f"cannot encode {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    """Message to one self-delimiting frame."""
    payload = _encode_payload(msg)
    return struct.pack("<IHH", len(payload) + 4, _KIND_OF[type(msg)], PROTO_VERSION) + payload


def _decode_payload(kind: int, payload: bytes) -> Message:
    try:
        if kind == MSG_REGISTER:
            name, off = _unpack_str(payload, 0)
            (slots,) = struct.unpack_from("<H", payload, off)
            return Register(name, slots)
        if kind == MSG_GRAPH:
            graph_id, off = _unpack_str(payload, 0)
            document, _ = _unpack_str(payload, off)
            return Graph(graph_id, document)
        if kind == MSG_TASK:
            return _unpack_task(payload, 0)[0]
        if kind == MSG_RESULT:
            task_id, t_total = struct.unpack_from("<Id", payload, 0)
            partial, _ = PartialResult.from_bytes(payload, 12)
            return Result(task_id, t_total, partial)
        if kind == MSG_FAIL:
            (task_id,) = struct.unpack_from("<I", payload, 0)
            error, _ = _unpack_str(payload, 4)
            return Fail(task_id, error)
        if kind == MSG_HEARTBEAT:
            return Heartbeat(_unpack_str(payload, 0)[0])
        if kind == MSG_SHUTDOWN:
            return Shutdown()
        if kind == MSG_SUBMIT:
            run_id, off = _unpack_str(payload, 0)
            document, off = _unpack_str(payload, off)
            max_retries, factor, n_tasks = struct.unpack_from("<HHI", payload, off)
            off += 8
            tasks = []
            for _ in range(n_tasks):
                t, off = _unpack_task(payload, off)
                tasks.append(t)
            return Submit(run_id, document, max_retries, factor, tuple(tasks))
        if kind == MSG_RUN_DONE:
            run_id, off = _unpack_str(payload, 0)
            wall_time, scheduler_bytes = struct.unpack_from("<dQ", payload, off)
            off += 16
            partial, off = PartialResult.from_bytes(payload, off)
            (n_records,) = struct.unpack_from("<I", payload, off)
            off += 4
            records = []
            for _ in range(n_records):
                r, off = _unpack_record(payload, off)
                records.append(r)
            return RunDone(run_id, wall_time, partial, tuple(records), scheduler_bytes)
        if kind == MSG_RUN_FAIL:
            run_id, off = _unpack_str(payload, 0)
            error, _ = _unpack_str(payload, off)
            return RunFail(run_id, error)
    except ProtoError:
        raise
    except (struct.error, IndexError, UnicodeDecodeError) as e:
        raise ProtoError(f"malformed payload for kind {kind}: {e}") from None
    raise ProtoError(f"unknown message kind {kind}")


def decode(frame: bytes) -> Message:
    """One complete frame (length word included) to a message."""
    if len(frame) < 8:
        raise ProtoError(f"frame too short: {len(frame)} bytes")
    length, kind, version = struct.unpack_from("<IHH", frame, 0)
    if length < 4:
        raise ProtoError(f"frame length {length} < 4")
    if length != len(frame) - 4:
        raise ProtoError(f"frame length {length} does not match body {len(frame) - 4}")
    if version != PROTO_VERSION:
        raise ProtoError(f"protocol version {version}, expected {PROTO_VERSION}")
    return _decode_payload(kind, frame[8:])


class FrameReader:
    """Incremental frame assembly from an arbitrary chunked byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while True:
            if len(self._buf) < 4:
                return out
            (length,) = struct.unpack_from("<I", self._buf, 0)
            if length < 4:
                raise ProtoError(f"frame length {length} < 4")
            if len(self._buf) < 4 + length:
                return out
            frame = bytes(self._buf[: 4 + length])
            del self._buf[: 4 + length]
            out.append(decode(frame))


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode(msg))


def recv_message(sock: socket.socket) -> Message | None:
    """One message off a socket; None on clean EOF at a frame boundary."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    if length < 4:
        raise ProtoError(f"frame length {length} < 4")
    body = _recv_exact(sock, length)
    if body is None:
        raise ProtoError("connection closed mid-frame")
    return decode(head + body)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            if buf:
                raise ProtoError("connection closed mid-frame")
            return None
        buf += part
    return bytes(buf)
