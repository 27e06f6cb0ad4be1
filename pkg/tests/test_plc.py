import copy
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twinbed.control import ControlFault, ControllerState, three_element_control
from twinbed.plant import SimStatus
from twinbed.plc import ImplantTarget, LogicImplant, Plc, sync_routine
from twinbed.tagbus import Quality, ReadOnlyTag, TagValue
from twinbed.testbed import Testbed, TestbedConfig


def inputs(t, level=50.0, w_fw=250.0, w_st=250.0, status="RUN"):
    return {"SG_LEVEL": TagValue("SG_LEVEL", level, t), "FW_FLOW": TagValue("FW_FLOW", w_fw, t),
            "ST_FLOW": TagValue("ST_FLOW", w_st, t), "FW_VALVE_POS": TagValue("FW_VALVE_POS", 0.5, t),
            "CW_TEMP": TagValue("CW_TEMP", 14.77, t), "SIM_STATUS": TagValue("SIM_STATUS", status, t)}


def drive(plc, n, status="RUN", level=49.0, t0=0):
    out = []
    for k in range(n):
        t = t0 + 10 * (k + 1)
        plc.refresh_inputs(inputs(t, level=level, status=status), t)
        out.append(plc.scan_cycle(t))
    return out


def test_zero_error_fixed_point():
    ctrl = ControllerState(last_cmd=0.5)
    cmd = three_element_control(50.0, 50.0, 250.0, 250.0, ctrl, 0.01)
    assert cmd == 0.5
    assert ctrl.level_integrator == 0.0 and ctrl.flow_integrator == 0.0


def test_level_below_setpoint_raises_demand():
    ctrl = ControllerState()
    cmd = three_element_control(48.0, 50.0, 250.0, 250.0, ctrl, 0.01)
    assert cmd > 0.5
    assert ctrl.level_integrator > 0


def test_non_finite_input_faults_without_mutation():
    ctrl = ControllerState(level_integrator=1.0)
    before = dataclasses.asdict(ctrl)
    with pytest.raises(ControlFault):
        three_element_control(float("nan"), 50.0, 250.0, 250.0, ctrl, 0.01)
    assert dataclasses.asdict(ctrl) == before


@given(st.floats(-1e3, 1e3), st.floats(0, 100), st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_command_always_in_range(level, sp, w_fw, w_st):
    ctrl = ControllerState()
    for _ in range(5):
        assert 0.0 <= three_element_control(level, sp, w_fw, w_st, ctrl, 0.01) <= 1.0


def test_integrators_bounded_under_saturation():
    ctrl = ControllerState()
    for _ in range(100_000):
        three_element_control(0.0, 50.0, 0.0, 250.0, ctrl, 0.01)
    i1 = (ctrl.level_integrator, ctrl.flow_integrator)
    for _ in range(10_000):
        three_element_control(0.0, 50.0, 0.0, 250.0, ctrl, 0.01)
    assert (ctrl.level_integrator, ctrl.flow_integrator) == i1
    assert ctrl.last_cmd == 1.0


def test_freeze_holds_state_for_1000_scans():
    plc = Plc()
    drive(plc, 200)
    ctrl = dataclasses.asdict(plc.ctrl)
    cmd = plc.mem["FW_VALVE_CMD"]
    writes = drive(plc, 1000, status="FREEZE", level=10.0, t0=2000)
    assert all(w == {} for w in writes)
    assert dataclasses.asdict(plc.ctrl) == ctrl
    assert plc.mem["FW_VALVE_CMD"] == cmd
    assert plc.sync.enabled is False


def test_reset_zeroes_integrators():
    plc = Plc(nominal_cmd=0.5)
    drive(plc, 300)
    assert plc.ctrl.level_integrator != 0
    drive(plc, 1, status="RESET", t0=3000)
    assert plc.ctrl.level_integrator == 0 and plc.ctrl.flow_integrator == 0
    assert plc.mem["FW_VALVE_CMD"].value == 0.5


@pytest.mark.parametrize("tag", [None, TagValue("SIM_STATUS", "BOGUS", 0),
                                 TagValue("SIM_STATUS", "RUN", 0, Quality.STALE)])
def test_unreadable_status_fails_safe(tag):
    flags = sync_routine(tag)
    assert flags.enabled is False and flags.sim_status is SimStatus.FREEZE


def test_run_enables():
    assert sync_routine(TagValue("SIM_STATUS", "RUN", 0)).enabled


def test_bumpless_resume():
    # a frozen-then-resumed PLC continues exactly where an uninterrupted one would
    plc, ref = Plc(), Plc()
    drive(plc, 300)
    cmds = [w["FW_VALVE_CMD"].value for w in drive(ref, 301)]
    drive(plc, 500, status="FREEZE", t0=3000)
    first = drive(plc, 1, t0=8000)[0]["FW_VALVE_CMD"].value
    assert first == cmds[-1]
    assert abs(first - cmds[-2]) <= abs(cmds[-2] - cmds[-3]) * 1.01


def test_stale_inputs_hold_outputs():
    plc = Plc()
    drive(plc, 10)
    ctrl = dataclasses.asdict(plc.ctrl)
    assert plc.scan_cycle(1000) == {}
    assert dataclasses.asdict(plc.ctrl) == ctrl
    assert plc.mem["SG_LEVEL"].quality is Quality.STALE


def test_zero_amplitude_implant_is_identity():
    base, hooked, free = Plc(), Plc(), Plc(implant_hook=False)
    hooked.set_implant(LogicImplant(0.0, 1.0, active=True))
    a, b, c = drive(base, 500), drive(hooked, 500), drive(free, 500)
    assert a == b == c


def test_implant_validation():
    with pytest.raises(ValueError):
        LogicImplant(0.2, 1.0)
    with pytest.raises(ValueError):
        LogicImplant(0.01, 50.0)


def test_implant_injects_sinusoid():
    # open-loop PLC with constant inputs: the only variation is the implant
    plc = Plc()
    drive(plc, 10, level=50.0)
    plc.set_implant(LogicImplant(0.02, 1.0, ImplantTarget.ACTUATOR_OUT, active=True))
    cmds = np.array([w["FW_VALVE_CMD"].value for w in drive(plc, 6000, level=50.0, t0=100)])
    x = cmds - cmds.mean()
    spec = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(len(x), d=0.01)
    assert freqs[np.argmax(spec)] == pytest.approx(1.0, abs=0.02)
    assert x.max() == pytest.approx(0.02, abs=1e-3)
    assert x.min() == pytest.approx(-0.02, abs=1e-3)


def test_output_tag_read_only():
    plc = Plc()
    with pytest.raises(ReadOnlyTag):
        plc.write_tag("FW_VALVE_CMD", 1.0)
    tv = plc.write_tag("CW_TEMP", 200.0)
    assert tv.quality is Quality.FORCED
    plc.refresh_inputs(inputs(10), 10)
    assert plc.mem["CW_TEMP"].value == 200.0


def test_closed_loop_steam_step_recovers():
    tb = Testbed(TestbedConfig(external_control=True))
    tb.run_until(100_000)
    tb.plant.inject_malfunction("STEAM_STEP", {"frac": 0.10})
    tb.run_until(400_000)
    late = [lv for t, lv, _, _ in tb.plant_log if t >= 400_000 - 1000]
    assert abs(late[-1] - 50.0) < 1.0
    assert all(0.0 <= c <= 1.0 for _, c in tb.cmd_log)
