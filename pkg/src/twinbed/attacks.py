"""Timed attack scenarios against the testbed, with ground-truth labels.

Scenario files are JSON::

    {"name": "fdi_cw_temp", "duration_ms": 120000,
     "testbed": {"external_control": false},
     "events": [{"t_ms": 60000, "action": "FDI_WRITE",
                 "params": {"tag": "CW_TEMP", "value": 200.0, "route": "PLANT_OVERRIDE"}}]}

Event times are millisecond offsets from the scenario epoch and must not decrease.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .historian import Historian
from .mitm import MitmRule, Transform
from .plant import Malfunction, PlantParams
from .plc import ImplantTarget, LogicImplant
from .tagbus import TagbusError, TagValue
from .testbed import LINKS, Testbed, TestbedConfig

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    pass


class AttackFailed(Exception):
    pass


class Action(str, enum.Enum):
    FDI_WRITE = "FDI_WRITE"
    MITM_START = "MITM_START"
    MITM_STOP = "MITM_STOP"
    DOS_START = "DOS_START"
    DOS_STOP = "DOS_STOP"
    REPLAY_RECORD = "REPLAY_RECORD"
    REPLAY_PLAY = "REPLAY_PLAY"
    IMPLANT_ON = "IMPLANT_ON"
    IMPLANT_OFF = "IMPLANT_OFF"
    MALFUNCTION = "MALFUNCTION"


class Route(str, enum.Enum):
    PLANT_OVERRIDE = "PLANT_OVERRIDE"
    PLC_WRITE = "PLC_WRITE"
    MITM_REWRITE = "MITM_REWRITE"


# (required, optional) parameter names per action
_SCHEMA: dict[Action, tuple[set[str], set[str]]] = {
    Action.FDI_WRITE: ({"tag", "value"}, {"route", "link", "duration_ms"}),
    Action.MITM_START: ({"link"}, {"rules", "duration_ms"}),
    Action.MITM_STOP: ({"link"}, set()),
    Action.DOS_START: ({"link", "drop_prob"}, {"delay_ms", "duration_ms"}),
    Action.DOS_STOP: ({"link"}, set()),
    Action.REPLAY_RECORD: ({"link", "window_ms"}, set()),
    Action.REPLAY_PLAY: ({"link"}, {"duration_ms"}),
    Action.IMPLANT_ON: ({"amplitude_frac", "freq_hz"}, {"target", "duration_ms"}),
    Action.IMPLANT_OFF: (set(), set()),
    Action.MALFUNCTION: ({"kind"}, {"tag", "value", "frac", "clear", "duration_ms"}),
}
# actions that open an attack-active interval, and the action that closes it
_OPENS = {Action.FDI_WRITE: None, Action.MITM_START: Action.MITM_STOP,
          Action.DOS_START: Action.DOS_STOP, Action.REPLAY_PLAY: None,
          Action.IMPLANT_ON: Action.IMPLANT_OFF}


@dataclass(frozen=True)
class Event:
    t_ms: int
    action: Action
    params: dict = field(default_factory=dict)

    @property
    def target(self) -> str:
        p = self.params
        if self.action is Action.FDI_WRITE:
            return p["tag"]
        if self.action in (Action.IMPLANT_ON, Action.IMPLANT_OFF):
            return "plc"
        if self.action is Action.MALFUNCTION:
            return p.get("tag", p["kind"])
        return p["link"]


@dataclass
class ScenarioScript:
    name: str
    events: list[Event]
    epoch: int = 0
    duration_ms: int | None = None
    testbed: dict = field(default_factory=dict)

    @property
    def end_ms(self) -> int:
        if self.duration_ms is not None:
            return self.duration_ms
        return (self.events[-1].t_ms if self.events else 0) + 10_000


def _check_number(action: Action, params: dict, key: str, lo: float | None = None,
                  hi: float | None = None) -> None:
    if key not in params:
        return
    v = params[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{action.value}: {key} must be a number")
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ScenarioError(f"{action.value}: {key}={v} outside [{lo}, {hi}]")


def _validate_event(ev: Event) -> None:
    required, optional = _SCHEMA[ev.action]
    keys = set(ev.params)
    if missing := required - keys:
        raise ScenarioError(f"{ev.action.value} at {ev.t_ms}: missing {sorted(missing)}")
    if extra := keys - required - optional:
        raise ScenarioError(f"{ev.action.value} at {ev.t_ms}: unknown {sorted(extra)}")
    p = ev.params
    if "link" in p and p["link"] not in LINKS:
        raise ScenarioError(f"{ev.action.value}: unknown link {p['link']!r}")
    _check_number(ev.action, p, "duration_ms", 1)
    _check_number(ev.action, p, "window_ms", 1)
    _check_number(ev.action, p, "drop_prob", 0, 1)
    _check_number(ev.action, p, "delay_ms", 0)
    _check_number(ev.action, p, "value")
    _check_number(ev.action, p, "frac", -1)
    try:
        if ev.action is Action.FDI_WRITE:
            Route(p.get("route", Route.PLANT_OVERRIDE))
        elif ev.action is Action.MITM_START:
            for r in p.get("rules", []):
                MitmRule.from_dict(r)
        elif ev.action is Action.IMPLANT_ON:
            _check_number(ev.action, p, "amplitude_frac")
            _check_number(ev.action, p, "freq_hz")
            LogicImplant(p["amplitude_frac"], p["freq_hz"], p.get("target", "ACTUATOR_OUT"))
        elif ev.action is Action.MALFUNCTION:
            Malfunction(p["kind"])
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"{ev.action.value} at {ev.t_ms}: {exc}") from None


def parse_scenario(obj: dict) -> ScenarioScript:
    if not isinstance(obj, dict) or "events" not in obj:
        raise ScenarioError("scenario needs an events list")
    events = []
    last = None
    for i, raw in enumerate(obj["events"]):
        try:
            t = raw["t_ms"]
            action = Action(raw["action"])
        except (KeyError, ValueError, TypeError):
            raise ScenarioError(f"event {i}: needs t_ms and a known action") from None
        if isinstance(t, bool) or not isinstance(t, int) or t < 0:
            raise ScenarioError(f"event {i}: t_ms must be a non-negative integer")
        if last is not None and t < last:
            raise ScenarioError(f"event {i}: time {t} precedes {last}")
        last = t
        ev = Event(t, action, dict(raw.get("params", {})))
        _validate_event(ev)
        events.append(ev)
    duration = obj.get("duration_ms")
    if duration is not None and (not isinstance(duration, int) or duration <= 0):
        raise ScenarioError("duration_ms must be a positive integer")
    return ScenarioScript(obj.get("name", "scenario"), events, int(obj.get("epoch", 0)),
                          duration, dict(obj.get("testbed", {})))


def load_scenario(path: str | Path) -> ScenarioScript:
    p = Path(path)
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: {exc}") from None
    script = parse_scenario(obj)
    if script.name == "scenario":
        script.name = p.stem
    return script


# --------------------------------------------------------------------------

def fdi_write(tb: Testbed, tag: str, value: float, route: Route | str = Route.PLANT_OVERRIDE,
              link: str = "plc-historian") -> TagValue:
    """Push a false value along one route; returns the value the target acknowledged."""
    route = Route(route)
    if route is Route.MITM_REWRITE:
        tap = tb.taps[link]
        if not tap.mitm_active:
            raise AttackFailed(f"no active MITM proxy on {link}")
        tap.add_rule(MitmRule(tag, Transform.SET_VALUE, float(value)))
        return TagValue(tag, float(value), tb.now_ms)
    target = "plant" if route is Route.PLANT_OVERRIDE else "plc"
    try:
        ack = tb.attacker_link(target).write_tag(tag, float(value), tb.now_ms)
    except TagbusError as exc:
        raise AttackFailed(f"{route.value} write of {tag} rejected: {exc}") from None
    return ack[tag]


def clear_fdi(tb: Testbed, tag: str, route: Route | str, link: str = "plc-historian") -> None:
    route = Route(route)
    if route is Route.PLANT_OVERRIDE:
        tb.plant.clear_malfunction(Malfunction.SENSOR_OVERRIDE, tag)
    elif route is Route.PLC_WRITE:
        tb.plc.clear_force(tag)
    else:
        tap = tb.taps[link]
        tap.rules = [r for r in tap.rules if r.match != tag]


@dataclass(frozen=True)
class LogRecord:
    t_ms: int
    action: str
    target: str
    outcome: str
    detail: str = ""


@dataclass(frozen=True)
class LabelInterval:
    start_ms: int
    end_ms: int
    kind: str
    target: str


@dataclass
class ScenarioRun:
    script: ScenarioScript
    seed: int
    log: list[LogRecord]
    labels: list[LabelInterval]
    testbed: Testbed

    @property
    def historian(self) -> Historian:
        return self.testbed.historian

    def intervals(self) -> list[tuple[int, int]]:
        return [(lab.start_ms, lab.end_ms) for lab in self.labels]

    def save(self, out_dir: str | Path) -> Path:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "run_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_ms", "action", "target", "outcome", "detail"])
            for r in self.log:
                w.writerow([r.t_ms, r.action, r.target, r.outcome, r.detail])
        with open(d / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["start_ms", "end_ms", "kind", "target"])
            for lab in self.labels:
                w.writerow([lab.start_ms, lab.end_ms, lab.kind, lab.target])
        with open(d / "plc_commands.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_ms", "FW_VALVE_CMD"])
            w.writerows((t, repr(c)) for t, c in self.testbed.cmd_log)
        self.historian.flush_snapshot(d / "historian")
        return d


def load_labels(path: str | Path) -> list[LabelInterval]:
    with open(path, newline="") as fh:
        return [LabelInterval(int(r["start_ms"]), int(r["end_ms"]), r["kind"], r["target"])
                for r in csv.DictReader(fh)]


class _Runner:
    def __init__(self, tb: Testbed, script: ScenarioScript) -> None:
        self.tb = tb
        self.script = script
        self.log: list[LogRecord] = []
        self.open: dict[tuple[str, str], tuple[int, str]] = {}
        self.labels: list[LabelInterval] = []
        self.pending: list[tuple[int, int, Any]] = []  # (t, seq, callable) for auto-clears
        self._seq = 0

    def record(self, ev_action: str, target: str, outcome: str, detail: str = "") -> None:
        self.log.append(LogRecord(self.tb.now_ms, ev_action, target, outcome, detail))

    def open_label(self, key: tuple[str, str], kind: str) -> None:
        if key not in self.open:
            self.open[key] = (self.tb.now_ms, kind)

    def close_label(self, key: tuple[str, str]) -> None:
        if key in self.open:
            start, kind = self.open.pop(key)
            self.labels.append(LabelInterval(start, self.tb.now_ms, kind, key[1]))

    def later(self, delay_ms: int, fn) -> None:
        self._seq += 1
        self.pending.append((self.tb.now_ms + int(delay_ms), self._seq, fn))
        self.pending.sort()

    def fire(self, ev: Event) -> None:
        tb, p, a = self.tb, ev.params, ev.action
        key = (a.value if a not in (Action.MITM_STOP, Action.DOS_STOP, Action.IMPLANT_OFF)
               else {Action.MITM_STOP: "MITM_START", Action.DOS_STOP: "DOS_START",
                     Action.IMPLANT_OFF: "IMPLANT_ON"}[a], ev.target)
        detail = json.dumps(p, sort_keys=True)
        try:
            if a is Action.FDI_WRITE:
                route = Route(p.get("route", Route.PLANT_OVERRIDE))
                link = p.get("link", "plc-historian")
                fdi_write(tb, p["tag"], p["value"], route, link)

                def clear(tag=p["tag"], route=route, link=link, key=key):
                    clear_fdi(tb, tag, route, link)
                    self.close_label(key)
                    self.record("FDI_CLEAR", tag, "OK")
                if "duration_ms" in p:
                    self.later(p["duration_ms"], clear)
            elif a is Action.MITM_START:
                rules = [MitmRule.from_dict(r) for r in p.get("rules", [])]
                tb.taps[p["link"]].start_mitm(rules)
            elif a is Action.MITM_STOP:
                tb.taps[p["link"]].stop_mitm()
            elif a is Action.DOS_START:
                tb.taps[p["link"]].start_dos(p["drop_prob"], p.get("delay_ms", 0.0))
            elif a is Action.DOS_STOP:
                tb.taps[p["link"]].stop_dos()
            elif a is Action.REPLAY_RECORD:
                tb.taps[p["link"]].record(int(p["window_ms"]))
            elif a is Action.REPLAY_PLAY:
                tb.taps[p["link"]].play()
            elif a is Action.IMPLANT_ON:
                tb.plc.set_implant(LogicImplant(p["amplitude_frac"], p["freq_hz"],
                                                ImplantTarget(p.get("target", "ACTUATOR_OUT")),
                                                active=True))
            elif a is Action.IMPLANT_OFF:
                tb.plc.set_implant(LogicImplant())
            elif a is Action.MALFUNCTION:
                if p.get("clear"):
                    tb.plant.clear_malfunction(p["kind"], p.get("tag"))
                else:
                    tb.plant.inject_malfunction(p["kind"], {k: p[k] for k in ("tag", "value", "frac")
                                                            if k in p})
        except (AttackFailed, TagbusError, ValueError, KeyError) as exc:
            self.record(a.value, ev.target, "FAILED", f"{type(exc).__name__}: {exc}")
            return
        self.record(a.value, ev.target, "OK", detail)

        if a in _OPENS:
            self.open_label(key, a.value)
            if "duration_ms" in p and a is not Action.FDI_WRITE:
                closer = _OPENS[a]
                self.later(p["duration_ms"], lambda ev=ev, closer=closer: self._auto_close(ev, closer))
        elif a in (Action.MITM_STOP, Action.DOS_STOP, Action.IMPLANT_OFF):
            self.close_label(key)

    def _auto_close(self, ev: Event, closer: Action | None) -> None:
        if closer is None:  # replay playback
            self.tb.taps[ev.params["link"]].stop_play()
            self.close_label((ev.action.value, ev.target))
            self.record("REPLAY_STOP", ev.target, "OK")
        else:
            self.fire(Event(self.tb.now_ms, closer, {k: v for k, v in ev.params.items()
                                                     if k in _SCHEMA[closer][0]}))

    def run(self) -> None:
        tb, events = self.tb, list(self.script.events)
        end = self.script.end_ms
        self.record("SCENARIO_START", self.script.name, "OK")
        while tb.now_ms < end:
            while self.pending and self.pending[0][0] <= tb.now_ms:
                _, _, fn = self.pending.pop(0)
                fn()
            while events and events[0].t_ms <= tb.now_ms:
                self.fire(events.pop(0))
            tb.tick()
        for key in list(self.open):
            self.close_label(key)
        self.labels.sort(key=lambda lab: (lab.start_ms, lab.kind))
        self.record("SCENARIO_STOP", self.script.name, "OK")


def testbed_config(script: ScenarioScript, seed: int, network: bool = False) -> TestbedConfig:
    opts = dict(script.testbed)
    plant_opts = opts.pop("plant", {})
    cfg = TestbedConfig(plant=PlantParams(**plant_opts), seed=seed, network=network)
    for k, v in opts.items():
        if not hasattr(cfg, k):
            raise ScenarioError(f"unknown testbed option {k!r}")
        setattr(cfg, k, v)
    return cfg


def run_scenario(script: ScenarioScript, seed: int = 0, network: bool = False,
                 testbed: Testbed | None = None) -> ScenarioRun:
    """Run ``script`` on a fresh lock-step testbed and return log, labels and the testbed.

    Events fire on the first scan tick at or after their time. Failed events are
    logged as FAILED and the scenario continues.
    """
    tb = testbed or Testbed(testbed_config(script, seed, network))
    runner = _Runner(tb, script)
    runner.run()
    return ScenarioRun(script, seed, runner.log, runner.labels, tb)
