"""Lumped-parameter surrogate plant: steam generator level loop and circulating water.

Fixed-step explicit Euler at ``step_ms``. The plant owns an internal three-element
level controller that can be handed over to an external PLC.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
import threading
from dataclasses import dataclass

import numpy as np

from .config import apply_kv, load_kv
from .control import ControllerState, three_element_control
from .tagbus import Message, Op, Quality, TagbusError, TagValue, UnknownTag

log = logging.getLogger(__name__)


class SimDiverged(ArithmeticError):
    pass


class UnknownMalfunction(TagbusError):
    pass


class SimStatus(str, enum.Enum):
    RUN = "RUN"
    FREEZE = "FREEZE"
    RESET = "RESET"


class ControlOwner(str, enum.Enum):
    INTERNAL = "INTERNAL"
    EXTERNAL = "EXTERNAL"


class Malfunction(str, enum.Enum):
    SENSOR_OVERRIDE = "SENSOR_OVERRIDE"
    STEAM_STEP = "STEAM_STEP"
    PUMP_TRIP = "PUMP_TRIP"


SENSOR_TAGS = ("CW_TEMP", "SG_LEVEL", "FW_FLOW", "ST_FLOW", "FW_VALVE_POS")
COMMAND_TAGS = ("FW_VALVE_CMD", "FW_PUMP_ON", "SIM_STATUS", "CONTROL_OWNER")
TAGS = SENSOR_TAGS + COMMAND_TAGS


@dataclass(frozen=True)
class PlantParams:
    sg_area_m2: float = 20.0
    rho_kg_m3: float = 750.0
    valve_tau_s: float = 2.0
    fw_max_kg_s: float = 500.0
    cw_tau_s: float = 60.0
    cw_ambient_c: float = 14.77
    level_setpoint_pct: float = 50.0
    step_ms: int = 50
    level_span_m: float = 10.0
    st_nominal_kg_s: float = 250.0
    cw_heat_offset_c: float = 0.0
    cw_noise_sigma_c: float = 0.02
    level_noise_sigma_pct: float = 0.01
    kp_level: float = 0.05
    ki_level: float = 0.005
    kp_flow: float = 0.01
    ki_flow: float = 0.05

    def __post_init__(self) -> None:
        positive = ("sg_area_m2", "rho_kg_m3", "valve_tau_s", "fw_max_kg_s", "cw_tau_s",
                    "step_ms", "level_span_m", "st_nominal_kg_s")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.level_setpoint_pct < 100:
            raise ValueError("level_setpoint_pct must lie in (0, 100)")
        if self.cw_noise_sigma_c < 0 or self.level_noise_sigma_pct < 0:
            raise ValueError("noise sigma must be non-negative")

    @property
    def inventory_kg(self) -> float:
        """Water mass corresponding to 100 % level."""
        return self.rho_kg_m3 * self.sg_area_m2 * self.level_span_m

    def controller(self) -> ControllerState:
        return ControllerState(kp_level=self.kp_level, ki_level=self.ki_level,
                               kp_flow=self.kp_flow, ki_flow=self.ki_flow,
                               flow_span_kg_s=self.fw_max_kg_s, scan_period_ms=self.step_ms,
                               last_cmd=self.st_nominal_kg_s / self.fw_max_kg_s)

    @classmethod
    def from_file(cls, path) -> "PlantParams":
        return apply_kv(cls(), load_kv(path))


@dataclass(frozen=True)
class PlantState:
    t_ms: int
    sg_level_pct: float
    w_fw_kg_s: float
    w_st_kg_s: float
    fw_valve_pos: float
    fw_valve_cmd: float
    fw_pump_on: bool
    pump_speed: float
    cw_temp_c: float
    sim_status: SimStatus
    control_owner: ControlOwner
    steam_demand: float = 1.0
    cw_noise_c: float = 0.0
    level_noise_pct: float = 0.0


def nominal_state(params: PlantParams, status: SimStatus = SimStatus.RUN,
                  owner: ControlOwner = ControlOwner.INTERNAL) -> PlantState:
    valve = params.st_nominal_kg_s / params.fw_max_kg_s
    return PlantState(
        t_ms=0, sg_level_pct=params.level_setpoint_pct, w_fw_kg_s=params.st_nominal_kg_s,
        w_st_kg_s=params.st_nominal_kg_s, fw_valve_pos=valve, fw_valve_cmd=valve,
        fw_pump_on=True, pump_speed=1.0,
        cw_temp_c=params.cw_ambient_c + params.cw_heat_offset_c,
        sim_status=status, control_owner=owner)


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def step(state: PlantState, params: PlantParams, dt_ms: int,
         rng: np.random.Generator | None = None) -> PlantState:
    """Advance the plant physics by one fixed step.

    FREEZE returns ``state`` untouched and RESET returns the nominal state (still
    in RESET). Noise samples are drawn only when ``rng`` is given.
    """
    if state.sim_status is SimStatus.FREEZE:
        return state
    if dt_ms != params.step_ms:
        raise ValueError(f"step must be {params.step_ms} ms, got {dt_ms}")
    if state.sim_status is SimStatus.RESET:
        return nominal_state(params, SimStatus.RESET, state.control_owner)

    dt = dt_ms / 1000.0
    pump_target = 1.0 if state.fw_pump_on else 0.0
    pos = state.fw_valve_pos + (state.fw_valve_cmd - state.fw_valve_pos) * dt / params.valve_tau_s
    speed = state.pump_speed + (pump_target - state.pump_speed) * dt / params.valve_tau_s
    level = state.sg_level_pct + (100.0 * (state.w_fw_kg_s - state.w_st_kg_s) * dt
                                  / params.inventory_kg)
    cw_eq = params.cw_ambient_c + params.cw_heat_offset_c
    temp = state.cw_temp_c + (cw_eq - state.cw_temp_c) * dt / params.cw_tau_s

    pos = _clamp(pos, 0.0, 1.0)
    speed = _clamp(speed, 0.0, 1.0)
    level = _clamp(level, 0.0, 100.0)
    cw_noise = level_noise = 0.0
    if rng is not None:
        if params.cw_noise_sigma_c > 0:
            cw_noise = float(rng.normal(0.0, params.cw_noise_sigma_c))
        if params.level_noise_sigma_pct > 0:
            level_noise = float(rng.normal(0.0, params.level_noise_sigma_pct))

    new = dataclasses.replace(
        state, t_ms=state.t_ms + dt_ms, sg_level_pct=level, fw_valve_pos=pos, pump_speed=speed,
        w_fw_kg_s=speed * pos * params.fw_max_kg_s,
        w_st_kg_s=params.st_nominal_kg_s * state.steam_demand,
        cw_temp_c=temp, cw_noise_c=cw_noise, level_noise_pct=level_noise)
    for name in ("sg_level_pct", "w_fw_kg_s", "w_st_kg_s", "fw_valve_pos", "cw_temp_c"):
        if not math.isfinite(getattr(new, name)):
            raise SimDiverged(f"{name} became non-finite at t={new.t_ms} ms")
    return new


def _as_float(name: str, value) -> float:
    if isinstance(value, (bool, str)):
        raise TypeError(f"{name} expects a number, got {value!r}")
    v = float(value)
    if not math.isfinite(v):
        raise ValueError(f"{name} must be finite")
    return v


class Plant:
    """Stateful plant with tag access; one stepping loop owns it, requests take the lock."""

    def __init__(self, params: PlantParams | None = None, seed: int = 0) -> None:
        self.params = params or PlantParams()
        self.seed = seed
        self.lock = threading.RLock()
        self.rng = np.random.default_rng(seed)
        self.state = nominal_state(self.params)
        self.ctrl = self.params.controller()
        self.overrides: dict[str, float] = {}

    # -- stepping -------------------------------------------------------
    def advance(self) -> PlantState:
        with self.lock:
            s = self.state
            if s.sim_status is SimStatus.RUN and s.control_owner is ControlOwner.INTERNAL:
                cmd = three_element_control(
                    self._measured("SG_LEVEL"), self.params.level_setpoint_pct,
                    self._measured("FW_FLOW"), self._measured("ST_FLOW"),
                    self.ctrl, self.params.step_ms / 1000.0)
                s = dataclasses.replace(s, fw_valve_cmd=cmd)
            new = step(s, self.params, self.params.step_ms, self.rng)
            if new.sim_status is SimStatus.RESET:
                self.ctrl.reset(new.fw_valve_cmd)
            self.state = new
            return new

    def run_for(self, seconds: float) -> PlantState:
        for _ in range(int(round(seconds * 1000 / self.params.step_ms))):
            self.advance()
        return self.state

    # -- tag access -----------------------------------------------------
    def _physical(self, tag: str):
        s = self.state
        return {
            "CW_TEMP": s.cw_temp_c + s.cw_noise_c,
            "SG_LEVEL": s.sg_level_pct + s.level_noise_pct,
            "FW_FLOW": s.w_fw_kg_s,
            "ST_FLOW": s.w_st_kg_s,
            "FW_VALVE_POS": s.fw_valve_pos,
            "FW_VALVE_CMD": s.fw_valve_cmd,
            "FW_PUMP_ON": s.fw_pump_on,
            "SIM_STATUS": s.sim_status.value,
            "CONTROL_OWNER": s.control_owner.value,
        }[tag]

    def _measured(self, tag: str) -> float:
        return self.overrides.get(tag, self._physical(tag))

    def read_tag(self, tag: str) -> TagValue:
        if tag not in TAGS:
            raise UnknownTag(tag)
        with self.lock:
            if tag in self.overrides:
                return TagValue(tag, self.overrides[tag], self.state.t_ms, Quality.FORCED)
            return TagValue(tag, self._physical(tag), self.state.t_ms, Quality.GOOD)

    def apply_command(self, tag: str, value) -> None:
        """Write a tag. Sensor tags become read-path overrides (FORCED)."""
        if tag not in TAGS:
            raise UnknownTag(tag)
        with self.lock:
            if tag in SENSOR_TAGS:
                self.inject_malfunction(Malfunction.SENSOR_OVERRIDE, {"tag": tag, "value": value})
            elif tag == "FW_VALVE_CMD":
                v = _clamp(_as_float(tag, value), 0.0, 1.0)
                self.state = dataclasses.replace(self.state, fw_valve_cmd=v)
            elif tag == "FW_PUMP_ON":
                if not isinstance(value, (bool, int)) or isinstance(value, float):
                    raise TypeError("FW_PUMP_ON expects a bool")
                self.state = dataclasses.replace(self.state, fw_pump_on=bool(value))
            elif tag == "SIM_STATUS":
                self.set_status(SimStatus(value))
            else:
                self.set_control_owner(ControlOwner(value))

    def set_status(self, status: SimStatus | str) -> None:
        status = SimStatus(status)
        with self.lock:
            if status is SimStatus.RESET:
                self.state = nominal_state(self.params, SimStatus.RESET, self.state.control_owner)
                self.ctrl.reset(self.state.fw_valve_cmd)
                self.overrides.clear()
            else:
                self.state = dataclasses.replace(self.state, sim_status=status)

    def set_control_owner(self, owner: ControlOwner | str) -> None:
        with self.lock:
            self.state = dataclasses.replace(self.state, control_owner=ControlOwner(owner))

    def inject_malfunction(self, kind: Malfunction | str, params: dict | None = None) -> None:
        try:
            kind = Malfunction(kind)
        except ValueError:
            raise UnknownMalfunction(str(kind)) from None
        params = params or {}
        with self.lock:
            if kind is Malfunction.SENSOR_OVERRIDE:
                tag = params["tag"]
                if tag not in SENSOR_TAGS:
                    raise UnknownTag(tag)
                self.overrides[tag] = _as_float(tag, params["value"])
            elif kind is Malfunction.STEAM_STEP:
                frac = float(params.get("frac", 0.10))
                self.state = dataclasses.replace(self.state,
                                                 steam_demand=self.state.steam_demand * (1 + frac))
            else:
                self.state = dataclasses.replace(self.state, fw_pump_on=False)
        log.info("malfunction %s %s", kind.value, params)

    def clear_malfunction(self, kind: Malfunction | str | None = None, tag: str | None = None) -> None:
        """Clear one malfunction kind (or all when ``kind`` is None)."""
        kinds = list(Malfunction) if kind is None else [Malfunction(kind)]
        with self.lock:
            for k in kinds:
                if k is Malfunction.SENSOR_OVERRIDE:
                    if tag is None:
                        self.overrides.clear()
                    else:
                        self.overrides.pop(tag, None)
                elif k is Malfunction.STEAM_STEP:
                    self.state = dataclasses.replace(self.state, steam_demand=1.0)
                else:
                    self.state = dataclasses.replace(self.state, fw_pump_on=True)

    # -- tagbus ---------------------------------------------------------
    def handle(self, msg: Message) -> Message:
        with self.lock:
            if msg.op in (Op.READ, Op.SUBSCRIBE_POLL):
                return msg.answer({t: self.read_tag(t) for t in msg.tags})
            if msg.op is Op.WRITE:
                for name, tv in msg.writes.items():
                    self.apply_command(name, tv.value)
                return msg.answer({n: self.read_tag(n) for n in msg.writes})
            return msg.answer({
                "component": TagValue("component", "plant", self.state.t_ms),
                "t_ms": TagValue("t_ms", self.state.t_ms, self.state.t_ms),
                "SIM_STATUS": self.read_tag("SIM_STATUS"),
            })
