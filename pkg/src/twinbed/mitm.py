"""Frame interposer: MITM rewrite rules, drop/delay (DoS) and record/replay.

The same ``Interposer`` plugs into an in-process ``LocalLink`` as a tap or sits
inside ``MitmProxy``, a transparent TCP relay between two tagbus endpoints.
"""
from __future__ import annotations

import enum
import fnmatch
import logging
import socket
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .tagbus import (Message, Op, TagbusError, TagValue, TransportError, decode_frame,
                     encode_frame, read_frame)

log = logging.getLogger(__name__)


class Transform(str, enum.Enum):
    SET_VALUE = "set_value"
    SCALE = "scale"
    DELAY_MS = "delay_ms"
    DROP_PROB = "drop_prob"


@dataclass(frozen=True)
class MitmRule:
    match: str = "*"
    transform: Transform = Transform.SET_VALUE
    arg: float = 0.0
    ops: frozenset[Op] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "transform", Transform(self.transform))
        if self.ops is not None:
            object.__setattr__(self, "ops", frozenset(Op(o) for o in self.ops))
        if self.transform is Transform.DROP_PROB and not 0.0 <= self.arg <= 1.0:
            raise ValueError("drop probability must lie in [0, 1]")
        if self.transform is Transform.DELAY_MS and self.arg < 0:
            raise ValueError("delay must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "MitmRule":
        kinds = [k for k in Transform if k.value in d]
        if len(kinds) != 1:
            raise ValueError(f"rule needs exactly one transform, got {sorted(d)}")
        ops = d.get("ops")
        return cls(d.get("match", "*"), kinds[0], float(d[kinds[0].value]),
                   None if ops is None else frozenset(ops))

    def applies(self, op: Op, tag: str) -> bool:
        return (self.ops is None or op in self.ops) and fnmatch.fnmatchcase(tag, self.match)

    def rewrite(self, tv: TagValue) -> TagValue:
        if isinstance(tv.value, (str, bool)):
            return tv
        if self.transform is Transform.SET_VALUE:
            return replace(tv, value=float(self.arg))
        if self.transform is Transform.SCALE:
            return replace(tv, value=float(tv.value) * self.arg)
        return tv


def _shift(values: dict[str, TagValue], dt: int) -> dict[str, TagValue]:
    return {k: replace(v, timestamp_ms=v.timestamp_ms + dt) for k, v in values.items()}


class Interposer:
    """Per-link attack state. With nothing enabled every frame passes byte-identical."""

    def __init__(self, name: str = "link", seed: int = 0,
                 clock: Callable[[], int] | None = None) -> None:
        self.name = name
        self.rng = np.random.default_rng(seed)
        self.clock = clock or (lambda: int(time.monotonic() * 1000))
        self.lock = threading.Lock()
        self.mitm_active = False
        self.rules: list[MitmRule] = []
        self.dos_drop = 0.0
        self.dos_delay_ms = 0.0
        self.dos_active = False
        self._record_until: int | None = None
        self._record_start = 0
        self.recorded: list[tuple[int, frozenset[str], dict[str, TagValue]]] = []
        self._play_start: int | None = None
        self._play_idx: dict[frozenset[str], int] = {}
        self.pending_delay_ms = 0.0
        self.stats = {"forwarded": 0, "dropped": 0, "rewritten": 0, "replayed": 0}

    # -- control --------------------------------------------------------
    def start_mitm(self, rules: list[MitmRule] | None = None) -> None:
        with self.lock:
            self.mitm_active = True
            self.rules = list(rules or [])

    def add_rule(self, rule: MitmRule) -> None:
        with self.lock:
            if not self.mitm_active:
                raise TagbusError(f"{self.name}: MITM not active")
            self.rules.append(rule)

    def stop_mitm(self) -> None:
        with self.lock:
            self.mitm_active = False
            self.rules = []

    def start_dos(self, drop_prob: float, delay_ms: float = 0.0) -> None:
        if not 0.0 <= drop_prob <= 1.0 or delay_ms < 0:
            raise ValueError("drop_prob must lie in [0, 1] and delay_ms be non-negative")
        with self.lock:
            self.dos_active, self.dos_drop, self.dos_delay_ms = True, drop_prob, delay_ms

    def stop_dos(self) -> None:
        with self.lock:
            self.dos_active = False

    def record(self, window_ms: int) -> None:
        with self.lock:
            now = self.clock()
            self.recorded = []
            self._record_start = now
            self._record_until = now + window_ms

    def play(self) -> None:
        with self.lock:
            if not self.recorded:
                raise TagbusError(f"{self.name}: nothing recorded to replay")
            self._play_start = self.clock()
            self._play_idx = {}

    def stop_play(self) -> None:
        with self.lock:
            self._play_start = None

    @property
    def idle(self) -> bool:
        return (not self.mitm_active and not self.dos_active and self._record_until is None
                and self._play_start is None)

    # -- tap ------------------------------------------------------------
    def on_request(self, frame: bytes) -> bytes | None:
        with self.lock:
            self.pending_delay_ms = self.dos_delay_ms if self.dos_active else 0.0
            if self.dos_active and self.dos_drop > 0 and self.rng.random() < self.dos_drop:
                self.stats["dropped"] += 1
                return None
            if not self.mitm_active or not self.rules:
                return frame
            msg = decode_frame(frame)
            if msg.op is not Op.WRITE:
                return frame
            writes, changed = {}, False
            for name, tv in msg.writes.items():
                new = tv
                for rule in self.rules:
                    if rule.applies(Op.WRITE, name):
                        new = rule.rewrite(new)
                changed |= new != tv
                writes[name] = new
            if not changed:
                return frame
            self.stats["rewritten"] += 1
            return encode_frame(Message(msg.op, msg.id, writes=writes))

    def on_reply(self, request: bytes, frame: bytes) -> bytes | None:
        with self.lock:
            now = self.clock()
            out = frame
            msg = None
            if self._record_until is not None:
                if now <= self._record_until:
                    msg = decode_frame(frame)
                    if msg.op is Op.READ and msg.ok:
                        self.recorded.append((now, frozenset(msg.reply), msg.reply))
                else:
                    self._record_until = None
            if self._play_start is not None:
                out = self._replay(request, frame) or out
            if self.mitm_active and self.rules:
                out = self._rewrite_reply(out)
            if out is frame:
                self.stats["forwarded"] += 1
            return out

    def _replay(self, request: bytes, frame: bytes) -> bytes | None:
        req = decode_frame(request)
        if req.op is not Op.READ:
            return None
        key = frozenset(req.tags)
        matches = [r for r in self.recorded if r[1] == key]
        if not matches:
            return None
        i = self._play_idx.get(key, 0)
        self._play_idx[key] = i + 1
        lap, j = divmod(i, len(matches))
        t_first = matches[0][0]
        period = matches[1][0] - t_first if len(matches) > 1 else 1
        span = matches[-1][0] - t_first + period
        # re-emit the recorded values with timestamps moved to the playback clock
        dt = self._play_start - t_first + lap * span
        self.stats["replayed"] += 1
        return encode_frame(Message(Op.READ, req.id, reply=_shift(matches[j][2], dt)))

    def _rewrite_reply(self, frame: bytes) -> bytes | None:
        msg = decode_frame(frame)
        if msg.op not in (Op.READ, Op.SUBSCRIBE_POLL) or not msg.ok:
            return frame
        reply, changed = {}, False
        for name, tv in msg.reply.items():
            new = tv
            for rule in self.rules:
                if not rule.applies(msg.op, name):
                    continue
                if rule.transform is Transform.DROP_PROB:
                    if self.rng.random() < rule.arg:
                        self.stats["dropped"] += 1
                        return None
                elif rule.transform is Transform.DELAY_MS:
                    self.pending_delay_ms += rule.arg
                else:
                    new = rule.rewrite(new)
            changed |= new != tv
            reply[name] = new
        if not changed:
            return frame
        self.stats["rewritten"] += 1
        return encode_frame(Message(msg.op, msg.id, reply=reply, ok=msg.ok, error=msg.error))


class MitmProxy:
    """Transparent TCP interposer. Requests and replies are relayed frame by frame."""

    def __init__(self, listen: tuple[str, int], upstream: tuple[str, int],
                 interposer: Interposer | None = None) -> None:
        self.upstream = upstream
        self.interposer = interposer or Interposer(f"{upstream[0]}:{upstream[1]}")
        self._sock = socket.create_server(listen)
        self._sock.settimeout(0.1)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._conns: list[socket.socket] = []

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def start(self) -> "MitmProxy":
        self._thread = threading.Thread(target=self._accept_loop, daemon=True, name="mitm")
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        self._sock.close()
        for c in list(self._conns):
            try:
                c.close()
            except OSError:
                pass

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                client, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._relay, args=(client,), daemon=True).start()

    def _relay(self, client: socket.socket) -> None:
        try:
            upstream = socket.create_connection(self.upstream, timeout=5)
        except OSError as exc:
            log.warning("proxy cannot reach upstream %s: %s", self.upstream, exc)
            client.close()
            return
        client.settimeout(None)
        self._conns += [client, upstream]
        tap = self.interposer
        try:
            while not self._stop.is_set():
                try:
                    req = read_frame(client)
                except (TransportError, OSError):
                    return
                fwd = tap.on_request(req)
                if fwd is None:
                    continue
                upstream.sendall(fwd)
                rep = read_frame(upstream)
                out = tap.on_reply(fwd, rep)
                if tap.pending_delay_ms:
                    time.sleep(tap.pending_delay_ms / 1000.0)
                if out is not None:
                    client.sendall(out)
        except (TransportError, OSError) as exc:
            log.info("proxy connection closed: %s", exc)
        finally:
            for s in (client, upstream):
                try:
                    s.close()
                except OSError:
                    pass

