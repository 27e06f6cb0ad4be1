"""Tag read/write exchange between testbed processes.

Frames are a 4-byte big-endian length followed by a UTF-8 JSON payload
holding exactly one message record. Requests look like::

    {"op": "READ", "id": 7, "tags": ["CW_TEMP"]}
    {"op": "WRITE", "id": 8, "writes": {"CW_TEMP": {"type": "float", "value": 200.0,
                                                    "ts": 60000, "q": "FORCED"}}}

and replies echo ``op`` and ``id`` and add ``reply``, ``ok`` and ``error``.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol, Union

log = logging.getLogger(__name__)

MAX_PAYLOAD = 1 << 20
HEADER = struct.Struct(">I")
INT64_MIN, INT64_MAX = -(1 << 63), (1 << 63) - 1
ID_MAX = (1 << 64) - 1

DEFAULT_PORTS = {"plant": 4810, "plc": 4811, "historian": 4812, "twin": 4813}

Scalar = Union[float, int, bool, str]


class TagbusError(Exception):
    pass


class FrameTooLarge(TagbusError):
    pass


class Incomplete(TagbusError):
    pass


class ParseError(TagbusError):
    pass


class TransportError(TagbusError):
    """Connection lost, refused, timed out, or the reply never arrived."""


class RemoteError(TagbusError):
    """The peer answered with ok=false."""


class UnknownTag(TagbusError, KeyError):
    def __str__(self) -> str:
        return f"unknown tag {self.args[0]!r}" if self.args else "unknown tag"


class ReadOnlyTag(TagbusError):
    pass


class Quality(str, enum.Enum):
    GOOD = "GOOD"
    STALE = "STALE"
    FORCED = "FORCED"


class Op(str, enum.Enum):
    READ = "READ"
    WRITE = "WRITE"
    STATUS = "STATUS"
    SUBSCRIBE_POLL = "SUBSCRIBE_POLL"


@dataclass(frozen=True)
class TagValue:
    name: str
    value: Scalar
    timestamp_ms: int = 0
    quality: Quality = Quality.GOOD

    def as_float(self) -> float:
        if isinstance(self.value, str):
            raise TypeError(f"tag {self.name} holds text, not a number")
        return float(self.value)


@dataclass
class Message:
    op: Op
    id: int = 0
    tags: list[str] = field(default_factory=list)
    writes: dict[str, TagValue] = field(default_factory=dict)
    reply: dict[str, TagValue] | None = None
    ok: bool = True
    error: str = ""

    @property
    def is_reply(self) -> bool:
        return self.reply is not None

    def answer(self, values: dict[str, TagValue] | None = None, ok: bool = True,
               error: str = "") -> "Message":
        return Message(op=self.op, id=self.id, reply=dict(values or {}), ok=ok, error=error)


def _value_type(v: Scalar) -> str:
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, int):
        return "int"
    if isinstance(v, float):
        return "float"
    if isinstance(v, str):
        return "text"
    raise ValueError(f"unsupported tag value type {type(v).__name__}")


def _check_value(v: Scalar) -> None:
    kind = _value_type(v)
    if kind == "int" and not INT64_MIN <= v <= INT64_MAX:
        raise ValueError(f"integer {v} outside int64")
    if kind == "float" and not math.isfinite(v):
        raise ValueError("non-finite float cannot be framed")


def _check_name(name: object) -> None:
    if not isinstance(name, str) or not name:
        raise ValueError(f"bad tag name {name!r}")


def validate(msg: Message) -> None:
    """Raise ValueError unless ``msg`` is a well-formed request or reply."""
    if not isinstance(msg.op, Op):
        raise ValueError(f"bad op {msg.op!r}")
    if isinstance(msg.id, bool) or not isinstance(msg.id, int) or not 0 <= msg.id <= ID_MAX:
        raise ValueError(f"bad correlation id {msg.id!r}")
    if msg.reply is not None:
        if msg.tags or msg.writes:
            raise ValueError("reply carries request fields")
        items = msg.reply
    else:
        if msg.op is Op.WRITE:
            if msg.tags:
                raise ValueError("WRITE carries only writes")
        elif msg.writes:
            raise ValueError(f"{msg.op.value} carries no writes")
        if msg.op is Op.STATUS and msg.tags:
            raise ValueError("STATUS carries no tags")
        if not msg.ok or msg.error:
            raise ValueError("request carries reply fields")
        for name in msg.tags:
            _check_name(name)
        items = msg.writes
    for key, tv in items.items():
        _check_name(key)
        if not isinstance(tv, TagValue) or tv.name != key:
            raise ValueError(f"entry {key!r} does not match its TagValue")
        _check_value(tv.value)
        if isinstance(tv.timestamp_ms, bool) or not isinstance(tv.timestamp_ms, int) \
                or not INT64_MIN <= tv.timestamp_ms <= INT64_MAX:
            raise ValueError(f"bad timestamp on {key}")
        if not isinstance(tv.quality, Quality):
            raise ValueError(f"bad quality on {key}")


def _tv_to_json(tv: TagValue) -> dict:
    return {"type": _value_type(tv.value), "value": tv.value, "ts": tv.timestamp_ms,
            "q": tv.quality.value}


def _tv_from_json(name: str, rec: object) -> TagValue:
    if not name:
        raise ParseError("empty tag name")
    if not isinstance(rec, dict) or len(rec) != 4:
        raise ParseError(f"bad tag record for {name!r}")
    try:
        kind, v, ts, q = rec["type"], rec["value"], rec["ts"], rec["q"]
    except KeyError:
        raise ParseError(f"bad tag record for {name!r}") from None
    if kind == "float":
        # JSON has no separate float token for integral values such as 2e3
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ParseError(f"value of {name!r} is not a float")
        v = float(v)
        if not math.isfinite(v):
            raise ParseError(f"value of {name!r} is not finite")
    elif kind == "int":
        if isinstance(v, bool) or not isinstance(v, int) or not INT64_MIN <= v <= INT64_MAX:
            raise ParseError(f"value of {name!r} is not an int64")
    elif kind == "bool":
        if not isinstance(v, bool):
            raise ParseError(f"value of {name!r} is not a bool")
    elif kind == "text":
        if not isinstance(v, str):
            raise ParseError(f"value of {name!r} is not text")
    else:
        raise ParseError(f"unknown value type {kind!r} for {name!r}")
    if isinstance(ts, bool) or not isinstance(ts, int) or not INT64_MIN <= ts <= INT64_MAX:
        raise ParseError(f"bad timestamp for {name!r}")
    try:
        quality = Quality(q)
    except (ValueError, TypeError):
        raise ParseError(f"bad quality for {name!r}") from None
    return TagValue(name, v, ts, quality)


def _to_json(msg: Message) -> dict:
    out: dict = {"op": msg.op.value, "id": msg.id}
    if msg.reply is not None:
        out["reply"] = {k: _tv_to_json(v) for k, v in msg.reply.items()}
        out["ok"] = msg.ok
        out["error"] = msg.error
    elif msg.op is Op.WRITE:
        out["writes"] = {k: _tv_to_json(v) for k, v in msg.writes.items()}
    elif msg.op is not Op.STATUS:
        out["tags"] = list(msg.tags)
    return out


def _reject_constant(token: str):
    raise ParseError(f"non-finite literal {token}")


_ENCODER = json.JSONEncoder(separators=(",", ":"), allow_nan=False)
_DECODER = json.JSONDecoder(parse_constant=_reject_constant)


def _from_json(obj: object) -> Message:
    if not isinstance(obj, dict):
        raise ParseError("payload is not a record")
    try:
        op = Op(obj.get("op"))
    except (ValueError, TypeError):
        raise ParseError(f"bad op {obj.get('op')!r}") from None
    mid = obj.get("id")
    if isinstance(mid, bool) or not isinstance(mid, int) or not 0 <= mid <= ID_MAX:
        raise ParseError("missing or bad correlation id")
    keys = set(obj) - {"op", "id"}
    if "reply" in obj:
        if keys != {"reply", "ok", "error"}:
            raise ParseError(f"reply fields {sorted(keys)}")
        rep, ok, err = obj["reply"], obj["ok"], obj["error"]
        if not isinstance(rep, dict) or not isinstance(ok, bool) or not isinstance(err, str):
            raise ParseError("bad reply fields")
        msg = Message(op, mid, reply={k: _tv_from_json(k, v) for k, v in rep.items()},
                      ok=ok, error=err)
    elif op is Op.WRITE:
        if keys != {"writes"} or not isinstance(obj["writes"], dict):
            raise ParseError("WRITE needs exactly a writes map")
        msg = Message(op, mid, writes={k: _tv_from_json(k, v) for k, v in obj["writes"].items()})
    elif op is Op.STATUS:
        if keys:
            raise ParseError("STATUS takes no fields")
        msg = Message(op, mid)
    else:
        if keys != {"tags"} or not isinstance(obj["tags"], list):
            raise ParseError(f"{op.value} needs exactly a tags list")
        tags = obj["tags"]
        if not all(isinstance(t, str) and t for t in tags):
            raise ParseError("tags must be non-empty strings")
        msg = Message(op, mid, tags=tags)
    return msg


def encode_frame(msg: Message) -> bytes:
    validate(msg)
    payload = _ENCODER.encode(_to_json(msg)).encode()
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> Message:
    try:
        obj = _DECODER.decode(payload.decode("utf-8"))
    except ParseError:
        raise
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise ParseError(str(exc)) from None
    return _from_json(obj)


def decode_frame(data: bytes) -> Message:
    """Decode exactly one frame; trailing bytes are a ParseError."""
    if len(data) < HEADER.size:
        raise Incomplete(f"need {HEADER.size} header bytes, have {len(data)}")
    (n,) = HEADER.unpack_from(data)
    if n > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload {n} exceeds {MAX_PAYLOAD}")
    if len(data) < HEADER.size + n:
        raise Incomplete(f"declared {n} payload bytes, have {len(data) - HEADER.size}")
    if len(data) > HEADER.size + n:
        raise ParseError(f"{len(data) - HEADER.size - n} trailing bytes after frame")
    return decode_payload(bytes(data[HEADER.size:]))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    """Read one raw frame (header included) from a stream socket."""
    head = _recv_exact(sock, HEADER.size)
    (n,) = HEADER.unpack(head)
    if n > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload {n} exceeds {MAX_PAYLOAD}")
    return head + _recv_exact(sock, n)


# --------------------------------------------------------------------------
# client side

class TagLink:
    """Convenience calls shared by every transport; subclasses provide ``request``."""

    def __init__(self) -> None:
        self._next_id = 0
        self._id_lock = threading.Lock()

    def next_id(self) -> int:
        with self._id_lock:
            self._next_id = (self._next_id + 1) & ID_MAX
            return self._next_id

    def request(self, msg: Message) -> Message:
        raise NotImplementedError

    def _call(self, msg: Message) -> Message:
        msg.id = self.next_id()
        rep = self.request(msg)
        if rep.id != msg.id or not rep.is_reply:
            raise TransportError(f"reply id {rep.id} does not match request {msg.id}")
        if not rep.ok:
            raise RemoteError(rep.error)
        return rep

    def read_tags(self, names: list[str]) -> dict[str, TagValue]:
        return self._call(Message(Op.READ, tags=list(names))).reply

    def read_tag(self, name: str) -> TagValue:
        return self.read_tags([name])[name]

    def write_tags(self, values: dict[str, TagValue]) -> dict[str, TagValue]:
        return self._call(Message(Op.WRITE, writes=dict(values))).reply

    def write_tag(self, name: str, value: Scalar, timestamp_ms: int = 0,
                  quality: Quality = Quality.GOOD) -> dict[str, TagValue]:
        return self.write_tags({name: TagValue(name, value, timestamp_ms, quality)})

    def status(self) -> dict[str, TagValue]:
        return self._call(Message(Op.STATUS)).reply

    def close(self) -> None:
        pass


class FrameTap(Protocol):
    """Hook that sees raw frames on a link; returning None drops the frame."""

    def on_request(self, frame: bytes) -> bytes | None: ...

    def on_reply(self, request: bytes, frame: bytes) -> bytes | None: ...


class LocalLink(TagLink):
    """In-process link that still round-trips every message through the frame codec.

    Used by the lock-step testbed so that taps (MITM, DoS, replay) act on the same
    bytes they would see on a socket.
    """

    def __init__(self, handler: Callable[[Message], Message], name: str = "local") -> None:
        super().__init__()
        self.handler = handler
        self.name = name
        self.tap: FrameTap | None = None
        self.down = False

    def request(self, msg: Message) -> Message:
        if self.down:
            raise TransportError(f"{self.name}: peer unreachable")
        frame = encode_frame(msg)
        if self.tap is not None:
            frame = self.tap.on_request(frame)
            if frame is None:
                raise TransportError(f"{self.name}: request lost")
        req_frame = frame
        reply = encode_frame(dispatch(self.handler, decode_frame(frame)))
        if self.tap is not None:
            reply = self.tap.on_reply(req_frame, reply)
            if reply is None:
                raise TransportError(f"{self.name}: reply timed out")
        return decode_frame(reply)


class TagClient(TagLink):
    def __init__(self, host: str, port: int, timeout: float = 2.0) -> None:
        super().__init__()
        self.address = (host, port)
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise TransportError(f"{self.address[0]}:{self.address[1]}: {exc}") from None
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self._sock

    def request(self, msg: Message) -> Message:
        sock = self._connect()
        try:
            sock.sendall(encode_frame(msg))
            return decode_frame(read_frame(sock))
        except (OSError, TransportError, Incomplete, ParseError) as exc:
            self.close()
            if isinstance(exc, TransportError):
                raise
            raise TransportError(str(exc)) from None

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self) -> "TagClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --------------------------------------------------------------------------
# server side

def dispatch(handler: Callable[[Message], Message], msg: Message) -> Message:
    """Run a handler and turn component errors into ok=false replies."""
    try:
        rep = handler(msg)
    except (TagbusError, KeyError, ValueError, TypeError) as exc:
        return msg.answer(ok=False, error=f"{type(exc).__name__}: {exc}")
    rep.id = msg.id
    return rep


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                frame = read_frame(sock)
            except (TransportError, FrameTooLarge, OSError):
                return
            try:
                msg = decode_frame(frame)
            except TagbusError as exc:
                log.warning("dropping connection from %s: %s", self.client_address, exc)
                return
            try:
                sock.sendall(encode_frame(dispatch(self.server.handler, msg)))
            except OSError:
                return


class TagServer(socketserver.ThreadingTCPServer):
    """One thread per connection; requests on a connection are answered in order."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], handler: Callable[[Message], Message]) -> None:
        self.handler = handler
        super().__init__(address, _FrameHandler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "TagServer":
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True, name=f"tagbus:{self.port}")
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2)


def serve(address: tuple[str, int], handler: Callable[[Message], Message]) -> TagServer:
    """Bind ``address`` and answer frames with ``handler`` on a background thread."""
    return TagServer(address, handler).start()
