"""Process topology: real-time component loops and the supervisor behind ``up``/``down``.

Each component is its own OS process serving tagbus on its port. Components talk
only over TCP, in dependency order plant -> plc -> historian -> twin.
"""
from __future__ import annotations

import json
import logging
import os
import signal
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import ConfigError, apply_kv, load_kv
from .control import ControllerState
from .historian import Historian, Source, load_manifest
from .plant import ControlOwner, Plant, PlantParams
from .plc import INPUT_TAGS, Plc
from .tagbus import DEFAULT_PORTS, TagbusError, TagClient, serve
from .twin import TwinMirror, load_manifest as load_twin_manifest

log = logging.getLogger(__name__)

ORDER = ("plant", "plc", "historian", "twin")
DEPENDS = {"plant": (), "plc": ("plant",), "historian": ("plc",), "twin": ("historian",)}
PID_FILE = "twinbed.pids"


class TopologyError(ValueError):
    pass


@dataclass
class ComponentSpec:
    name: str
    port: int
    config: Path | None
    enabled: bool = True


@dataclass
class TopologyConfig:
    components: dict[str, ComponentSpec]
    host: str = "127.0.0.1"
    epoch_ms: int = 0
    state_dir: Path = field(default_factory=lambda: Path(".twinbed"))

    def enabled(self) -> list[ComponentSpec]:
        return [self.components[n] for n in ORDER if n in self.components
                and self.components[n].enabled]

    def validate(self) -> None:
        seen: dict[int, str] = {}
        for spec in self.enabled():
            if spec.port in seen:
                raise TopologyError(f"port {spec.port} assigned to both {seen[spec.port]} "
                                    f"and {spec.name}")
            seen[spec.port] = spec.name
            if spec.config is None:
                raise TopologyError(f"{spec.name} is enabled but has no config")
            if not spec.config.exists():
                raise TopologyError(f"{spec.name} config {spec.config} not found")
            for dep in DEPENDS[spec.name]:
                if dep not in self.components or not self.components[dep].enabled:
                    raise TopologyError(f"{spec.name} needs {dep} enabled")


def load_topology(path: str | Path, env: dict[str, str] | None = None) -> TopologyConfig:
    """Read a topology JSON; ``TWINBED_<NAME>_PORT`` variables override ports."""
    p = Path(path)
    env = os.environ if env is None else env
    try:
        raw = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TopologyError(f"{p}: {exc}") from None
    comps = {}
    for name, c in raw.get("components", {}).items():
        if name not in ORDER:
            raise TopologyError(f"unknown component {name!r}")
        port = int(env.get(f"TWINBED_{name.upper()}_PORT", c.get("port", DEFAULT_PORTS[name])))
        cfg = c.get("config")
        comps[name] = ComponentSpec(name, port, (p.parent / cfg) if cfg else None,
                                    bool(c.get("enabled", True)))
    if not comps:
        raise TopologyError(f"{p}: no components")
    state = Path(raw.get("state_dir", ".twinbed"))
    topo = TopologyConfig(comps, raw.get("host", "127.0.0.1"), int(raw.get("epoch_ms", 0)),
                          state if state.is_absolute() else p.parent / state)
    topo.validate()
    return topo


# -- component processes ------------------------------------------------------

class Clock:
    def __init__(self, epoch_wall_s: float) -> None:
        self.offset = epoch_wall_s - time.time() + time.monotonic()

    def now_ms(self) -> int:
        return int((time.monotonic() - self.offset) * 1000)


def _every(period_s: float, fn, stop: threading.Event) -> None:
    nxt = time.monotonic()
    while not stop.is_set():
        try:
            fn()
        except Exception:  # keep the loop alive; a component never dies on one bad cycle
            log.exception("cycle failed")
        nxt += period_s
        delay = nxt - time.monotonic()
        if delay < 0:
            nxt = time.monotonic()
            delay = 0
        stop.wait(delay)


def _plant_config(path: Path) -> tuple[PlantParams, int, ControlOwner]:
    kv = load_kv(path)
    seed = int(kv.pop("seed", 0))
    owner = ControlOwner(kv.pop("control_owner", "INTERNAL"))
    return apply_kv(PlantParams(), kv), seed, owner


def _plc_config(path: Path) -> Plc:
    kv = load_kv(path)
    sp = float(kv.pop("level_sp_pct", 50.0))
    nominal = float(kv.pop("nominal_cmd", 0.5))
    return Plc(apply_kv(ControllerState(), kv), level_sp_pct=sp, nominal_cmd=nominal)


def run_component(name: str, port: int, config: Path, host: str = "127.0.0.1",
                  upstream: tuple[str, int] | None = None, epoch_wall_s: float | None = None,
                  snapshot_dir: Path | None = None, stop: threading.Event | None = None) -> None:
    """Serve one component until ``stop`` is set (or SIGTERM/SIGINT in a process)."""
    stop = stop or threading.Event()
    clock = Clock(time.time() if epoch_wall_s is None else epoch_wall_s)
    finish = None
    if name == "plant":
        params, seed, owner = _plant_config(config)
        plant = Plant(params, seed)
        plant.set_control_owner(owner)
        handler, period, cycle = plant.handle, params.step_ms / 1000.0, plant.advance
    elif name == "plc":
        plc = _plc_config(config)
        link = TagClient(*upstream, timeout=0.5)

        def cycle() -> None:
            now = clock.now_ms()
            try:
                plc.refresh_inputs(link.read_tags(list(INPUT_TAGS)), now)
            except TagbusError as exc:
                log.debug("input refresh failed: %s", exc)
            writes = plc.scan_cycle(now)
            if writes:
                try:
                    link.write_tags(writes)
                except TagbusError as exc:
                    log.debug("output write failed: %s", exc)
        handler, period = plc.handle, plc.scan_period_ms / 1000.0
    elif name == "historian":
        hist = Historian({Source.PLC: TagClient(*upstream, timeout=0.5)}, load_manifest(config),
                         snapshot_dir)
        last_flush = [time.monotonic()]

        def cycle() -> None:
            hist.poll_once(clock.now_ms())
            if time.monotonic() - last_flush[0] > 1.0:
                hist.flush_snapshot()
                last_flush[0] = time.monotonic()
        handler, period, finish = hist.handle, 0.01, hist.flush_snapshot
    elif name == "twin":
        twin = TwinMirror(TagClient(*upstream, timeout=0.5), load_twin_manifest(config))
        handler, period = twin.handle, twin.poll_period_ms / 1000.0

        def cycle() -> None:
            twin.poll_update(clock.now_ms())
    else:
        raise TopologyError(f"unknown component {name!r}")

    server = serve((host, port), handler)
    log.info("%s serving on %s:%d", name, host, server.port)
    worker = threading.Thread(target=_every, args=(period, cycle, stop), daemon=True)
    worker.start()
    try:
        while not stop.wait(0.2):
            pass
    finally:
        worker.join(timeout=2)
        server.stop()
        if finish is not None:
            finish()
        log.info("%s stopped", name)


# -- supervisor ---------------------------------------------------------------

def port_free(host: str, port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        try:
            s.bind((host, port))
        except OSError:
            return False
    return True


def wait_ready(host: str, port: int, timeout_s: float = 10.0) -> bool:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        try:
            with TagClient(host, port, timeout=0.5) as c:
                c.status()
            return True
        except (TagbusError, OSError):
            time.sleep(0.1)
    return False


class Supervisor:
    """Starts enabled components in dependency order and tears them down again."""

    def __init__(self, topo: TopologyConfig) -> None:
        self.topo = topo
        self.procs: dict[str, subprocess.Popen] = {}
        self.epoch_wall_s = time.time() - topo.epoch_ms / 1000.0

    def _command(self, spec: ComponentSpec) -> list[str]:
        t = self.topo
        cmd = [sys.executable, "-m", "twinbed", "component", spec.name, "--port", str(spec.port),
               "--config", str(spec.config), "--host", t.host, "--epoch", repr(self.epoch_wall_s),
               "--snapshot-dir", str(t.state_dir / "historian")]
        deps = DEPENDS[spec.name]
        if deps:
            cmd += ["--upstream", f"{t.host}:{t.components[deps[0]].port}"]
        return cmd

    def up(self, ready_timeout_s: float = 10.0) -> None:
        t = self.topo
        for spec in t.enabled():
            if not port_free(t.host, spec.port):
                raise TopologyError(f"port {spec.port} for {spec.name} is already in use")
        t.state_dir.mkdir(parents=True, exist_ok=True)
        try:
            for spec in t.enabled():
                self.procs[spec.name] = subprocess.Popen(self._command(spec))
                if not wait_ready(t.host, spec.port, ready_timeout_s):
                    raise TopologyError(f"{spec.name} did not become ready on port {spec.port}")
                log.info("%s ready on port %d", spec.name, spec.port)
        except BaseException:
            self.down()
            raise
        (t.state_dir / PID_FILE).write_text(json.dumps(
            {"supervisor": os.getpid(), **{n: p.pid for n, p in self.procs.items()}}))

    def down(self, timeout_s: float = 5.0) -> None:
        for name in reversed(ORDER):
            p = self.procs.pop(name, None)
            if p is None:
                continue
            p.terminate()
            try:
                p.wait(timeout_s)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
        (self.topo.state_dir / PID_FILE).unlink(missing_ok=True)

    def wait(self, run_for_s: float | None = None) -> None:
        stop = threading.Event()
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
        deadline = None if run_for_s is None else time.monotonic() + run_for_s
        while not stop.wait(0.2):
            if deadline is not None and time.monotonic() >= deadline:
                break
            dead = [n for n, p in self.procs.items() if p.poll() is not None]
            if dead:
                raise TopologyError(f"{dead[0]} exited unexpectedly")


def signal_down(state_dir: Path, timeout_s: float = 10.0) -> list[str]:
    """Stop a running ``up`` from another shell; returns the names signalled."""
    pid_path = state_dir / PID_FILE
    if not pid_path.exists():
        raise TopologyError(f"no running topology recorded in {state_dir}")
    pids = json.loads(pid_path.read_text())
    sup = pids.pop("supervisor", None)
    targets = [("supervisor", sup)] if sup and _alive(sup) else list(pids.items())
    for _, pid in targets:
        try:
            os.kill(pid, signal.SIGTERM)
        except ProcessLookupError:
            pass
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline and any(_alive(p) for p in [sup, *pids.values()] if p):
        time.sleep(0.1)
    pid_path.unlink(missing_ok=True)
    return [n for n, _ in targets]


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    # reap if it is our own zombie child
    try:
        done, _ = os.waitpid(pid, os.WNOHANG)
        return done == 0
    except ChildProcessError:
        return True
