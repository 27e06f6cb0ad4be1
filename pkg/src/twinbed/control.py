"""Three-element steam generator level control (level, feedwater flow, steam flow).

Level PI sets a feedwater flow demand on top of measured steam flow; a flow PI
trims the valve around that demand. Flows are handled as fractions of the
maximum feedwater flow so that one gain set works for any plant size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


class ControlFault(ArithmeticError):
    pass


@dataclass
class ControllerState:
    kp_level: float = 0.05
    ki_level: float = 0.005
    kp_flow: float = 0.01
    ki_flow: float = 0.05
    flow_span_kg_s: float = 500.0
    scan_period_ms: int = 10
    level_integrator: float = 0.0
    flow_integrator: float = 0.0
    last_cmd: float = 0.5

    def reset(self, cmd: float = 0.5) -> None:
        self.level_integrator = 0.0
        self.flow_integrator = 0.0
        self.last_cmd = cmd


def _clamp(x: float, lo: float = 0.0, hi: float = 1.0) -> float:
    return lo if x < lo else hi if x > hi else x


def three_element_control(level_pct: float, level_sp_pct: float, w_fw: float, w_st: float,
                          ctrl: ControllerState, dt_s: float) -> float:
    """One controller update; mutates the integrators in ``ctrl`` and returns the valve command.

    The valve command is the normalized flow demand (steam-flow feedforward plus
    level PI) plus a flow PI trim, clamped to [0, 1]. Integration is skipped while
    the output is saturated in the direction the error pushes (conditional
    anti-windup). Non-finite inputs raise ControlFault with ``ctrl`` untouched.
    """
    if not all(math.isfinite(v) for v in (level_pct, level_sp_pct, w_fw, w_st, dt_s)):
        raise ControlFault("non-finite controller input")
    span = ctrl.flow_span_kg_s
    f_fw, f_st = w_fw / span, w_st / span

    e_level = level_sp_pct - level_pct
    i_level = ctrl.level_integrator + e_level * dt_s
    flow_sp = f_st + ctrl.kp_level * e_level + ctrl.ki_level * i_level
    e_flow = flow_sp - f_fw
    i_flow = ctrl.flow_integrator + e_flow * dt_s
    raw = flow_sp + ctrl.kp_flow * e_flow + ctrl.ki_flow * i_flow

    if raw > 1.0 or raw < 0.0:
        pushing = 1.0 if raw > 1.0 else -1.0
        if e_flow * pushing > 0:
            i_flow = ctrl.flow_integrator
        if e_level * pushing > 0:
            i_level = ctrl.level_integrator
        flow_sp = f_st + ctrl.kp_level * e_level + ctrl.ki_level * i_level
        e_flow = flow_sp - f_fw
        raw = flow_sp + ctrl.kp_flow * e_flow + ctrl.ki_flow * i_flow

    if not math.isfinite(raw):
        raise ControlFault("controller output diverged")
    ctrl.level_integrator = i_level
    ctrl.flow_integrator = i_flow
    ctrl.last_cmd = _clamp(raw)
    return ctrl.last_cmd
