"""Emulated PLC: tag memory, 100 Hz scan, simulator-status sync, level control, implant hook."""
from __future__ import annotations

import enum
import logging
import math
import threading
from dataclasses import dataclass

from .control import ControlFault, ControllerState, three_element_control
from .plant import SimStatus
from .tagbus import Message, Op, Quality, ReadOnlyTag, TagValue, UnknownTag

log = logging.getLogger(__name__)

INPUT_TAGS = ("SG_LEVEL", "FW_FLOW", "ST_FLOW", "FW_VALVE_POS", "CW_TEMP", "SIM_STATUS")
# Sensor inputs are network-writable, as on the real testbed where a client pushes
# simulator values into the PLC; a network write pins the tag (FORCED).
FORCEABLE = ("SG_LEVEL", "FW_FLOW", "ST_FLOW", "FW_VALVE_POS", "CW_TEMP")
OUTPUT_TAGS = ("FW_VALVE_CMD",)
INTERNAL_TAGS = ("SG_LEVEL_SP", "LEVEL_INTEGRATOR", "FLOW_INTEGRATOR", "PLC_ENABLED")
ALL_TAGS = INPUT_TAGS + OUTPUT_TAGS + INTERNAL_TAGS


class StaleInput(UserWarning):
    pass


class ImplantTarget(str, enum.Enum):
    SENSOR_IN = "SENSOR_IN"
    ACTUATOR_OUT = "ACTUATOR_OUT"


@dataclass
class SyncFlags:
    sim_status: SimStatus = SimStatus.FREEZE
    enabled: bool = False


@dataclass
class LogicImplant:
    amplitude_frac: float = 0.0
    freq_hz: float = 1.0
    target: ImplantTarget = ImplantTarget.ACTUATOR_OUT
    active: bool = False

    def __post_init__(self) -> None:
        self.target = ImplantTarget(self.target)
        if not 0.0 <= self.amplitude_frac <= 0.1:
            raise ValueError("implant amplitude must lie in [0, 0.1] of span")
        if not 0.0 < self.freq_hz < 50.0:
            raise ValueError("implant frequency must lie in (0, 50) Hz")


def sync_routine(status_tag: TagValue | None) -> SyncFlags:
    """Map the simulator status tag to run flags; anything unreadable holds (FREEZE)."""
    if status_tag is None or status_tag.quality is Quality.STALE:
        return SyncFlags(SimStatus.FREEZE, False)
    try:
        status = SimStatus(status_tag.value)
    except ValueError:
        return SyncFlags(SimStatus.FREEZE, False)
    return SyncFlags(status, status is SimStatus.RUN)


class TagMemory:
    """Tag table with a per-scan guard against writing an output twice."""

    def __init__(self) -> None:
        self.tags: dict[str, TagValue] = {}
        self._written: set[str] = set()

    def __getitem__(self, name: str) -> TagValue:
        return self.tags[name]

    def get(self, name: str) -> TagValue | None:
        return self.tags.get(name)

    def set(self, tv: TagValue) -> None:
        self.tags[tv.name] = tv

    def begin_scan(self) -> dict[str, TagValue]:
        self._written.clear()
        return dict(self.tags)

    def write_output(self, tv: TagValue) -> None:
        if tv.name in self._written:
            raise RuntimeError(f"output {tv.name} written twice in one scan")
        self._written.add(tv.name)
        self.tags[tv.name] = tv


class Plc:
    """PLC scan engine.

    ``refresh_inputs`` mirrors plant tags into memory, ``scan_cycle`` runs one
    scan and returns the writes to send back to the plant. ``implant_hook=False``
    builds the PLC without the implant slot at all.
    """

    def __init__(self, ctrl: ControllerState | None = None, level_sp_pct: float = 50.0,
                 nominal_cmd: float = 0.5, implant_hook: bool = True) -> None:
        self.ctrl = ctrl or ControllerState()
        self.nominal_cmd = nominal_cmd
        self.implant_hook = implant_hook
        self.implant = LogicImplant()
        self.sync = SyncFlags()
        self.mem = TagMemory()
        self.lock = threading.RLock()
        self.forced: set[str] = set()
        self.last_input_ms: int | None = None
        self.now_ms = 0
        self._implant_scans = 0
        self.ctrl.last_cmd = nominal_cmd
        self.mem.set(TagValue("SG_LEVEL_SP", float(level_sp_pct), 0))
        self.mem.set(TagValue("FW_VALVE_CMD", float(nominal_cmd), 0))
        self._publish_internal(0)

    @property
    def scan_period_ms(self) -> int:
        return self.ctrl.scan_period_ms

    def _publish_internal(self, ts: int) -> None:
        self.mem.set(TagValue("LEVEL_INTEGRATOR", self.ctrl.level_integrator, ts))
        self.mem.set(TagValue("FLOW_INTEGRATOR", self.ctrl.flow_integrator, ts))
        self.mem.set(TagValue("PLC_ENABLED", self.sync.enabled, ts))

    def refresh_inputs(self, values: dict[str, TagValue], now_ms: int) -> None:
        with self.lock:
            for name, tv in values.items():
                if name in INPUT_TAGS and name not in self.forced:
                    self.mem.set(tv)
            self.last_input_ms = now_ms

    def set_implant(self, implant: LogicImplant) -> None:
        """Install implant parameters (scenario runner only, never via tag writes)."""
        with self.lock:
            if implant.active and not self.implant.active:
                self._implant_scans = 0
            self.implant = implant

    def clear_force(self, tag: str | None = None) -> None:
        with self.lock:
            self.forced = set() if tag is None else self.forced - {tag}

    def _inputs_stale(self, now_ms: int) -> bool:
        return self.last_input_ms is None or now_ms - self.last_input_ms > 2 * self.scan_period_ms

    def scan_cycle(self, now_ms: int) -> dict[str, TagValue]:
        with self.lock:
            self.now_ms = now_ms
            snap = self.mem.begin_scan()
            if self._inputs_stale(now_ms):
                log.warning("PLC inputs stale at %d ms; outputs held", now_ms)
                for name in INPUT_TAGS:
                    tv = snap.get(name)
                    if tv is not None and tv.quality is Quality.GOOD:
                        self.mem.set(TagValue(name, tv.value, tv.timestamp_ms, Quality.STALE))
                self.sync = SyncFlags(SimStatus.FREEZE, False)
                self.mem.set(TagValue("PLC_ENABLED", False, self.mem["PLC_ENABLED"].timestamp_ms))
                return {}

            self.sync = sync_routine(snap.get("SIM_STATUS"))
            if self.sync.sim_status is SimStatus.RESET:
                self.ctrl.reset(self.nominal_cmd)
                self._implant_scans = 0
                self.mem.write_output(TagValue("FW_VALVE_CMD", self.nominal_cmd, now_ms))
                self._publish_internal(now_ms)
                return {}
            if not self.sync.enabled:
                # Hold: no integration, no writes, memory untouched.
                if self.mem["PLC_ENABLED"].value:
                    self.mem.set(TagValue("PLC_ENABLED", False, now_ms))
                return {}

            cmd = self._control(snap)
            if cmd is None:
                return {}
            out = TagValue("FW_VALVE_CMD", cmd, now_ms)
            self.mem.write_output(out)
            self._publish_internal(now_ms)
            return {"FW_VALVE_CMD": out}

    def _control(self, snap: dict[str, TagValue]) -> float | None:
        try:
            level = snap["SG_LEVEL"].as_float()
            w_fw = snap["FW_FLOW"].as_float()
            w_st = snap["ST_FLOW"].as_float()
            sp = snap["SG_LEVEL_SP"].as_float()
        except (KeyError, TypeError):
            log.warning("PLC inputs incomplete; outputs held")
            return None
        implant = self.implant if self.implant_hook else None
        wave = 0.0
        if implant is not None and implant.active:
            t = self._implant_scans * self.scan_period_ms / 1000.0
            wave = implant.amplitude_frac * math.sin(2.0 * math.pi * implant.freq_hz * t)
            self._implant_scans += 1
            if implant.target is ImplantTarget.SENSOR_IN:
                w_fw = w_fw + wave * self.ctrl.flow_span_kg_s
        try:
            cmd = three_element_control(level, sp, w_fw, w_st, self.ctrl,
                                        self.scan_period_ms / 1000.0)
        except ControlFault as exc:
            log.warning("control fault: %s; output held", exc)
            return None
        if implant is not None and implant.active and implant.target is ImplantTarget.ACTUATOR_OUT:
            cmd = min(1.0, max(0.0, cmd + wave))
        return cmd

    # -- tagbus ---------------------------------------------------------
    def read_tag(self, name: str) -> TagValue:
        tv = self.mem.get(name)
        if tv is None:
            if name not in ALL_TAGS:
                raise UnknownTag(name)
            # known input never refreshed yet
            return TagValue(name, "" if name == "SIM_STATUS" else 0.0, 0, Quality.STALE)
        return tv

    def write_tag(self, name: str, value) -> TagValue:
        if name not in ALL_TAGS:
            raise UnknownTag(name)
        if name == "SG_LEVEL_SP":
            if isinstance(value, (bool, str)) or not 0 < float(value) < 100:
                raise ValueError("SG_LEVEL_SP must be a number in (0, 100)")
            tv = TagValue(name, float(value), self.now_ms)
        elif name in FORCEABLE:
            if isinstance(value, (bool, str)):
                raise TypeError(f"{name} expects a number")
            tv = TagValue(name, float(value), self.now_ms, Quality.FORCED)
            self.forced.add(name)
        else:
            raise ReadOnlyTag(f"{name} is read-only")
        self.mem.set(tv)
        return tv

    def handle(self, msg: Message) -> Message:
        with self.lock:
            if msg.op in (Op.READ, Op.SUBSCRIBE_POLL):
                return msg.answer({t: self.read_tag(t) for t in msg.tags})
            if msg.op is Op.WRITE:
                for name in msg.writes:
                    if name not in ALL_TAGS:
                        raise UnknownTag(name)
                    if name not in FORCEABLE and name != "SG_LEVEL_SP":
                        raise ReadOnlyTag(f"{name} is read-only")
                return msg.answer({n: self.write_tag(n, tv.value) for n, tv in msg.writes.items()})
            return msg.answer({
                "component": TagValue("component", "plc", self.now_ms),
                "t_ms": TagValue("t_ms", self.now_ms, self.now_ms),
                "PLC_ENABLED": TagValue("PLC_ENABLED", self.sync.enabled, self.now_ms),
            })
