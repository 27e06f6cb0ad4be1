"""Digital-twin state mirror: polls the historian for a manifest of tags."""
from __future__ import annotations

import enum
import logging
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .historian import SensorManifestEntry, load_manifest as _load_entries
from .tagbus import Message, Op, Quality, RemoteError, TagbusError, TagLink, TagValue, UnknownTag

log = logging.getLogger(__name__)

NEVER = 1 << 62


class VarStatus(str, enum.Enum):
    FRESH = "FRESH"
    STALE = "STALE"


class ComponentKind(str, enum.Enum):
    PUMP_OR_VALVE = "PUMP_OR_VALVE"
    THERMAL = "THERMAL"


class Indication(str, enum.Enum):
    RED_RUNNING_OPEN = "RED_RUNNING_OPEN"
    GREEN_SECURED_SHUT = "GREEN_SECURED_SHUT"


class UnknownKind(KeyError):
    pass


@dataclass(frozen=True)
class MirrorVar:
    tag: str
    value: float = 0.0
    age_ms: int = NEVER
    status: VarStatus = VarStatus.STALE
    timestamp_ms: int | None = None
    quality: Quality = Quality.STALE


@dataclass(frozen=True)
class StatusEncoding:
    component_kind: ComponentKind
    indication: Indication | None = None
    gradient: float | None = None


DEFAULT_KINDS = {
    "FW_PUMP_ON": ComponentKind.PUMP_OR_VALVE,
    "FW_VALVE_POS": ComponentKind.PUMP_OR_VALVE,
    "FW_VALVE_CMD": ComponentKind.PUMP_OR_VALVE,
    "CW_TEMP": ComponentKind.THERMAL,
}


def load_manifest(path: str | Path) -> list[MirrorVar]:
    """One STALE mirror variable per manifest row (ManifestError on bad rows)."""
    return [MirrorVar(e.tag) for e in _load_entries(path)]


def status_encoding(var: MirrorVar, kind: ComponentKind | None,
                    t_range: tuple[float, float] = (0.0, 100.0),
                    open_threshold: float = 0.01) -> StatusEncoding:
    """Red/green for pumps and valves, a [0, 1] cold-to-hot scalar for thermal tags."""
    if kind is None:
        raise UnknownKind(var.tag)
    kind = ComponentKind(kind)
    if kind is ComponentKind.PUMP_OR_VALVE:
        running = var.value > open_threshold
        return StatusEncoding(kind, Indication.RED_RUNNING_OPEN if running
                              else Indication.GREEN_SECURED_SHUT)
    t_min, t_max = t_range
    if not t_max > t_min:
        raise ValueError("thermal range must have t_max > t_min")
    g = (var.value - t_min) / (t_max - t_min)
    return StatusEncoding(kind, gradient=min(1.0, max(0.0, g)))


class TwinMirror:
    """Watch list refreshed from the historian every ``poll_period_ms``.

    A variable is STALE once its producer timestamp has not changed for more
    than four poll periods.
    """

    def __init__(self, historian: TagLink | None, watch: Sequence[MirrorVar | SensorManifestEntry | str],
                 poll_period_ms: int = 250, kinds: dict[str, ComponentKind] | None = None,
                 ranges: dict[str, tuple[float, float]] | None = None,
                 static_tags: dict[str, str] | None = None) -> None:
        self.link = historian
        self.poll_period_ms = poll_period_ms
        self.kinds = dict(DEFAULT_KINDS if kinds is None else kinds)
        self.ranges = dict(ranges or {})
        self.static_tags = dict(static_tags or {})
        self.lock = threading.Lock()
        self.vars: dict[str, MirrorVar] = {}
        for w in watch:
            tag = w if isinstance(w, str) else w.tag
            self.vars[tag] = MirrorVar(tag)
        self._seen_ms: dict[str, int] = {}
        self.now_ms = 0

    @property
    def stale_after_ms(self) -> int:
        return 4 * self.poll_period_ms

    def _fetch(self) -> dict[str, TagValue]:
        tags = list(self.vars)
        try:
            return self.link.read_tags(tags)
        except RemoteError:
            # some tag has no data yet; fall back to one read per tag
            out = {}
            for t in tags:
                try:
                    out.update(self.link.read_tags([t]))
                except RemoteError:
                    pass
            return out

    def poll_update(self, now_ms: int) -> int:
        """Refresh from the historian; returns how many variables got a new sample."""
        fetched: dict[str, TagValue] = {}
        if self.link is not None and self.vars:
            try:
                fetched = self._fetch()
            except TagbusError as exc:
                log.warning("twin poll failed at %d ms: %s", now_ms, exc)
        updated = 0
        with self.lock:
            self.now_ms = now_ms
            for tag, var in self.vars.items():
                tv = fetched.get(tag)
                if tv is not None and not isinstance(tv.value, str) and tv.timestamp_ms != var.timestamp_ms:
                    var = replace(var, value=float(tv.value), timestamp_ms=tv.timestamp_ms,
                                  quality=tv.quality)
                    self._seen_ms[tag] = now_ms
                    updated += 1
                seen = self._seen_ms.get(tag)
                age = NEVER if seen is None else now_ms - seen
                status = VarStatus.STALE if age > self.stale_after_ms else VarStatus.FRESH
                self.vars[tag] = replace(var, age_ms=age, status=status)
        return updated

    def get(self, tag: str) -> MirrorVar:
        with self.lock:
            try:
                return self.vars[tag]
            except KeyError:
                raise UnknownTag(tag) from None

    def encoding(self, tag: str) -> StatusEncoding:
        return status_encoding(self.get(tag), self.kinds.get(tag),
                               self.ranges.get(tag, (0.0, 100.0)))

    def handle(self, msg: Message) -> Message:
        if msg.op in (Op.READ, Op.SUBSCRIBE_POLL):
            out = {}
            for tag in msg.tags:
                if tag in self.static_tags:
                    out[tag] = TagValue(tag, self.static_tags[tag], self.now_ms)
                    continue
                v = self.get(tag)
                q = v.quality if v.status is VarStatus.FRESH else Quality.STALE
                out[tag] = TagValue(tag, v.value, v.timestamp_ms or 0, q)
            return msg.answer(out)
        if msg.op is Op.WRITE:
            raise TagbusError("twin mirror is read-only over the network")
        return msg.answer({"component": TagValue("component", "twin", self.now_ms),
                           "watched": TagValue("watched", len(self.vars), self.now_ms)})
