"""The three update experiments, each runnable under any update mode.

A scenario is a topology, the initial apps, and a timed schedule of actions
(start a flow, add a server, update apps).  ``run_scenario`` drives it in
simulated time and collects per-flow throughput, paths and outcomes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from . import mu
from .runtime import MODES, Runtime
from .simnet import Flow, Host, build_topology
from .topos import diamond_spec, firewall_spec, lb_server, lb_spec
from .updc import UpdateSpec

log = logging.getLogger(__name__)

LB_VIP = "10.0.0.100"


@dataclass(frozen=True)
class Action:
    at: float
    kind: str  # "flow" | "update" | "add_server"
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    topology: dict
    apps: tuple
    schedule: tuple
    duration: float
    mode: str = "state_transfer"
    seed: int = 0
    app_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    flows: dict  # flow id -> Flow
    reports: list
    policies: list
    update_times: list
    csv: str
    runtime: Runtime = field(repr=False)

    def series(self, flow_id) -> list:
        return self.flows[flow_id].series

    def steady(self, flow_id, before: float, window: int = 3) -> float:
        """Mean throughput over the ``window`` whole seconds ending at ``before``."""
        s = self.flows[flow_id].series
        end = int(before)
        return sum(s[end - window:end]) / window


def firewall(mode="state_transfer", seed=0, duration=30.0) -> ScenarioConfig:
    return ScenarioConfig(
        "firewall", firewall_spec(), (("fw", "v1"),),
        (
            Action(1.0, "flow", {"id": "f1", "src": "h1", "dst_ip": "10.0.0.2", "dst_port": 80,
                                 "src_port": 3456}),
            Action(10.0, "update", {"apps": [["fw", "v1", "v2"]], "mu": []}),
            Action(20.0, "update", {"apps": [["fw", "v2", "v3"]], "mu": ["fw_timeout"]}),
        ),
        duration, mode, seed)


def routing(mode="state_transfer", seed=0, duration=40.0) -> ScenarioConfig:
    return ScenarioConfig(
        "routing", diamond_spec(), (("topology", "v1"), ("routing", "v1")),
        (
            Action(1.0, "flow", {"id": "fA", "src": "hA", "dst_ip": "10.0.0.3", "dst_port": 5001,
                                 "src_port": 40000}),
            Action(1.0, "flow", {"id": "fB", "src": "hB", "dst_ip": "10.0.0.3", "dst_port": 5001,
                                 "src_port": 40001}),
            Action(20.0, "update", {"apps": [["topology", "v1", "v2"], ["routing", "v1", "v2"]],
                                    "mu": ["topology_weight"]}),
        ),
        duration, mode, seed)


def loadbalancer(mode="state_transfer", seed=0, duration=60.0) -> ScenarioConfig:
    def conn(i, t):
        return Action(t, "flow", {"id": f"c{i}", "src": "client", "dst_ip": LB_VIP, "dst_port": 80,
                                  "src_port": 40000 + i})
    servers = [_server_entry(1), _server_entry(2)]
    return ScenarioConfig(
        "loadbalancer", lb_spec(2), (("lb", "v1"),),
        (conn(1, 1.0), conn(2, 2.0), conn(3, 3.0),
         Action(40.0, "add_server", {"index": 3}),
         Action(40.0, "update", {"apps": [["lb", "v1", "v2"]], "mu": []}),
         conn(4, 45.0), conn(5, 50.0)),
        duration, mode, seed,
        {"lb": {"vip": LB_VIP, "servers": servers, "seed": seed, "client_port": 1}})


SCENARIOS = {"firewall": firewall, "routing": routing, "loadbalancer": loadbalancer}


def scenario(name, mode="state_transfer", seed=0, **kw) -> ScenarioConfig:
    try:
        make = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return make(mode, seed, **kw)


def _server_entry(i) -> dict:
    h = lb_server(i)
    return {"id": h["id"], "ip": h["ip"], "port": h["port"]}


def _add_server(rt: Runtime, index: int):
    h = lb_server(index)
    rt.sim.add_host(Host(h["id"], h["ip"], h["switch"], h["port"], h["capacity_bps"]))
    entry = _server_entry(index)
    cfg = rt.app_config.setdefault("lb", {})
    cfg["servers"] = list(cfg.get("servers", [])) + [entry]
    # operator edit of the stored config, picked up by whichever version starts next
    admin = rt.nib.connect("admin", [("lb_conn", "ns_v0")])
    try:
        doc = rt.nib.get(admin, "lb_conn", "config")
        if doc is not None:
            doc["servers"] = list(doc.get("servers", [])) + [entry]
            rt.nib.put(admin, "lb_conn", "config", doc)
    finally:
        rt.nib.disconnect(admin)


def run_scenario(cfg: ScenarioConfig, prepare=None) -> ScenarioResult:
    """Runs ``cfg`` to completion; ``prepare(runtime)`` may attach hooks before boot."""
    rt = Runtime(build_topology(cfg.topology), app_config=cfg.app_config,
                 record=(cfg.mode == "record_replay"))
    if prepare is not None:
        prepare(rt)
    flows, update_times = {}, []

    def do(action: Action):
        a = action.args
        if action.kind == "flow":
            flows[a["id"]] = rt.sim.add_flow(Flow(a["id"], a["src"], a["dst_ip"], int(a["dst_port"]),
                                                  int(a["src_port"]), start=action.at))
        elif action.kind == "add_server":
            _add_server(rt, int(a["index"]))
        elif action.kind == "update":
            spec = UpdateSpec.of([tuple(u) for u in a["apps"]], [mu.source(n) for n in a.get("mu", [])])
            update_times.append(action.at)
            rt.update(spec, cfg.mode)
        else:
            raise ValueError(f"unknown action {action.kind!r}")

    rt.boot(cfg.apps)
    for action in sorted(cfg.schedule, key=lambda x: x.at):
        rt.at(action.at, lambda action=action: do(action), f"{action.kind} {action.args}")
    rt.run_until(cfg.duration)
    return ScenarioResult(cfg, flows, list(rt.reports), list(rt.platform.composed_log),
                          update_times, rt.sim.metrics_csv(), rt)


def with_mode(cfg: ScenarioConfig, mode: str) -> ScenarioConfig:
    return replace(cfg, mode=mode)
