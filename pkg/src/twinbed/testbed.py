"""Lock-step wiring of plant, PLC, historian and twin on a shared simulated clock.

Every data exchange between components goes through a tagbus link: in-process
(``LocalLink``, still frame-encoded) or real localhost TCP through pass-through
``MitmProxy`` relays when ``network=True``. Each link carries an ``Interposer``
so attacks can be switched on per link.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .control import ControllerState
from .historian import Historian, SensorManifestEntry, Source
from .mitm import Interposer, MitmProxy
from .plant import ControlOwner, Plant, PlantParams
from .plc import INPUT_TAGS, Plc
from .tagbus import LocalLink, TagbusError, TagClient, TagLink, TagServer, serve
from .twin import MirrorVar, TwinMirror

log = logging.getLogger(__name__)

TICK_MS = 10
LINKS = ("plant-plc", "plc-historian", "plant-historian", "historian-twin")

DEFAULT_MANIFEST = (
    SensorManifestEntry("CW_TEMP", Source.PLC, 100),
    SensorManifestEntry("SG_LEVEL", Source.PLC, 100),
    SensorManifestEntry("FW_FLOW", Source.PLC, 100),
    SensorManifestEntry("ST_FLOW", Source.PLC, 100),
    SensorManifestEntry("FW_VALVE_CMD", Source.PLC, 100),
)


@dataclass
class TestbedConfig:
    __test__ = False

    plant: PlantParams = field(default_factory=PlantParams)
    plc_gains: ControllerState | None = None
    manifest: tuple[SensorManifestEntry, ...] = DEFAULT_MANIFEST
    twin_tags: tuple[str, ...] = ("CW_TEMP", "SG_LEVEL", "FW_VALVE_CMD")
    twin_poll_ms: int = 250
    external_control: bool = False
    seed: int = 0
    network: bool = False
    host: str = "127.0.0.1"


class Testbed:
    __test__ = False  # not a pytest class

    def __init__(self, cfg: TestbedConfig | None = None) -> None:
        self.cfg = cfg = cfg or TestbedConfig()
        self.now_ms = 0
        self.plant = Plant(cfg.plant, seed=cfg.seed)
        gains = cfg.plc_gains or ControllerState(
            kp_level=cfg.plant.kp_level, ki_level=cfg.plant.ki_level, kp_flow=cfg.plant.kp_flow,
            ki_flow=cfg.plant.ki_flow, flow_span_kg_s=cfg.plant.fw_max_kg_s)
        nominal = cfg.plant.st_nominal_kg_s / cfg.plant.fw_max_kg_s
        self.plc = Plc(gains, level_sp_pct=cfg.plant.level_setpoint_pct, nominal_cmd=nominal)
        self.historian = Historian(manifest=cfg.manifest)
        self.twin = TwinMirror(None, [MirrorVar(t) for t in cfg.twin_tags],
                               poll_period_ms=cfg.twin_poll_ms)
        if cfg.external_control:
            self.plant.set_control_owner(ControlOwner.EXTERNAL)

        self.taps = {name: Interposer(name, seed=cfg.seed + i, clock=lambda: self.now_ms)
                     for i, name in enumerate(LINKS)}
        self._servers: list[TagServer] = []
        self._proxies: list[MitmProxy] = []
        handlers = {"plant": self.plant.handle, "plc": self.plc.handle,
                    "historian": self.historian.handle, "twin": self.twin.handle}
        if cfg.network:
            self.addresses = {}
            for comp, h in handlers.items():
                srv = serve((cfg.host, 0), h)
                self._servers.append(srv)
                self.addresses[comp] = (cfg.host, srv.port)
        else:
            self.addresses = None
        self._handlers = handlers

        self.links: dict[str, TagLink] = {
            "plant-plc": self._link("plant", "plant-plc"),
            "plc-historian": self._link("plc", "plc-historian"),
            "plant-historian": self._link("plant", "plant-historian"),
            "historian-twin": self._link("historian", "historian-twin"),
        }
        self.historian.sources = {Source.PLC: self.links["plc-historian"],
                                  Source.PLANT: self.links["plant-historian"]}
        self.twin.link = self.links["historian-twin"]

        self.cmd_log: list[tuple[int, float]] = []
        self.plant_log: list[tuple[int, float, float, float]] = []
        self.hooks: list = []

    def _link(self, component: str, name: str) -> TagLink:
        tap = self.taps[name]
        if self.addresses is None:
            link = LocalLink(self._handlers[component], name)
            link.tap = tap
            return link
        proxy = MitmProxy((self.cfg.host, 0), self.addresses[component], tap).start()
        self._proxies.append(proxy)
        return TagClient(*proxy.address, timeout=0.5)

    def attacker_link(self, component: str) -> TagLink:
        """A fresh, untapped link straight to a component (the attacker's own access)."""
        if self.addresses is None:
            return LocalLink(self._handlers[component], f"attacker-{component}")
        return TagClient(*self.addresses[component], timeout=1.0)

    # -- clock ----------------------------------------------------------
    def tick(self) -> None:
        """Advance the shared clock by one PLC scan period."""
        self.now_ms += TICK_MS
        now = self.now_ms
        if now % self.cfg.plant.step_ms == 0:
            s = self.plant.advance()
            self.plant_log.append((now, s.sg_level_pct, self.plant.read_tag("CW_TEMP").as_float(),
                                   s.fw_valve_pos))
        link = self.links["plant-plc"]
        try:
            self.plc.refresh_inputs(link.read_tags(list(INPUT_TAGS)), now)
        except TagbusError as exc:
            log.debug("PLC input refresh failed at %d ms: %s", now, exc)
        writes = self.plc.scan_cycle(now)
        if writes:
            try:
                link.write_tags(writes)
            except TagbusError as exc:
                log.debug("PLC output write failed at %d ms: %s", now, exc)
        self.cmd_log.append((now, float(self.plc.mem["FW_VALVE_CMD"].value)))
        self.historian.poll_once(now)
        if now % self.twin.poll_period_ms == 0:
            self.twin.poll_update(now)
        for hook in self.hooks:
            hook(self)

    def run_until(self, t_ms: int) -> None:
        while self.now_ms < t_ms:
            self.tick()

    def run_for(self, seconds: float) -> None:
        self.run_until(self.now_ms + int(round(seconds * 1000)))

    def close(self) -> None:
        for link in self.links.values():
            link.close()
        for p in self._proxies:
            p.stop()
        for s in self._servers:
            s.stop()
        self._proxies.clear()
        self._servers.clear()

    def __enter__(self) -> "Testbed":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
