"""Topology discovery: switches from SwitchUp, links from probes, hosts from PacketIns.

v2 also keeps a per-edge weight: an exponential moving average of the
link's utilisation, ``1 + rate/capacity``, floored at 1.
"""
from __future__ import annotations

import logging

from ..errors import UnknownSwitch
from ..events import PacketIn, PortStats, SwitchDown, SwitchUp
from ..policy import Packet
from ..simnet import LLDP_PREFIX
from .base import App, AppDescriptor

log = logging.getLogger(__name__)

NS = "topology"
ALPHA = 0.5
MIN_WEIGHT = 1.0


def node_key(node_id) -> str:
    return f"node_{node_id}"


def edge_key(src, src_port, dst, dst_port) -> str:
    return f"edge_{src}_{src_port}_{dst}_{dst_port}"


def ema_weight(weight: float, rate_bps: float, capacity_bps: float, alpha: float = ALPHA) -> float:
    sample = 1.0 + rate_bps / capacity_bps
    return max(MIN_WEIGHT, weight + alpha * (sample - weight))


class TopoState:
    """In-memory mirror of the topology namespace."""

    def __init__(self, docs=None):
        self.docs = dict(docs or {})

    def switches(self) -> dict:
        return {d["id"]: d for k, d in self.docs.items() if k.startswith("node_") and d["kind"] == "switch"}

    def hosts(self) -> dict:
        return {d["id"]: d for k, d in self.docs.items() if k.startswith("node_") and d["kind"] == "host"}

    def edges(self) -> dict:
        return {k: d for k, d in self.docs.items() if k.startswith("edge_")}

    def edge_ports(self) -> set:
        out = set()
        for e in self.edges().values():
            out.add((e["src"], e["src_port"]))
            out.add((e["dst"], e["dst_port"]))
        return out

    def edge_at(self, sw, port):
        for k, e in self.edges().items():
            if e["src"] == sw and e["src_port"] == port:
                return k, e
        return None, None


def topology_handle_event(state: TopoState, ev, version: str, rates: dict | None = None):
    """Returns ``(state, puts, deletes)``; ``rates`` maps (switch, port) to the measured
    bitrate for PortStats folding (v2)."""
    docs = dict(state.docs)
    puts, deletes = {}, []

    def put(k, d):
        if docs.get(k) != d:
            docs[k] = d
            puts[k] = d

    def drop(k):
        if k in docs:
            del docs[k]
            puts.pop(k, None)
            deletes.append(k)

    if isinstance(ev, SwitchUp):
        put(node_key(ev.switch), {"id": ev.switch, "kind": "switch",
                                  "ports": {str(p): cap for p, cap in ev.ports}})
    elif isinstance(ev, SwitchDown):
        drop(node_key(ev.switch))
        for k, e in list(TopoState(docs).edges().items()):
            if ev.switch in (e["src"], e["dst"]):
                drop(k)
        for h in list(TopoState(docs).hosts().values()):
            if h["attachment"][0] == ev.switch:
                drop(node_key(h["id"]))
    elif isinstance(ev, PacketIn):
        pkt = ev.packet
        if pkt.src_ip.startswith(LLDP_PREFIX):
            src = pkt.src_ip[len(LLDP_PREFIX):]
            sw_doc = docs.get(node_key(src))
            if sw_doc is None or node_key(ev.switch) not in docs:
                return TopoState(docs), puts, deletes
            k = edge_key(src, pkt.src_port, ev.switch, ev.port)
            if k not in docs:
                doc = {"src": src, "dst": ev.switch, "src_port": pkt.src_port, "dst_port": ev.port,
                       "capacity": sw_doc["ports"].get(str(pkt.src_port), 1e6)}
                if version != "v1":
                    doc["weight"] = 1
                put(k, doc)
            for h in list(TopoState(docs).hosts().values()):
                if tuple(h["attachment"]) in ((src, pkt.src_port), (ev.switch, ev.port)):
                    drop(node_key(h["id"]))
        elif pkt.proto in ("tcp", "udp", "other") and node_key(ev.switch) in docs:
            known = TopoState(docs)
            if (ev.switch, ev.port) not in known.edge_ports() and node_key(pkt.src_ip) not in docs:
                put(node_key(pkt.src_ip), {"id": pkt.src_ip, "kind": "host",
                                           "attachment": [ev.switch, ev.port]})
    elif isinstance(ev, PortStats) and version != "v1" and rates is not None:
        rate = rates.get((ev.switch, ev.port))
        k, e = TopoState(docs).edge_at(ev.switch, ev.port)
        if k is not None and rate is not None:
            w = ema_weight(float(e.get("weight", 1)), rate, float(e["capacity"]))
            w = round(w, 6)
            if w != e.get("weight"):
                put(k, dict(e, weight=w))
    return TopoState(docs), puts, deletes


class Topology(App):
    def __init__(self, env, config=None):
        super().__init__(env, config)
        self.probe_interval = float(self.config.get("probe_interval", 5.0))
        self.state = TopoState()
        self._last = {}

    def timers(self):
        return {"probe": self.probe_interval}

    def startup(self):
        self.state = TopoState(self.load(NS))
        yield
        self.no_change()

    def on_probe(self):
        for sw, doc in sorted(self.state.switches().items()):
            for port in sorted(int(p) for p in doc["ports"]):
                pkt = Packet(sw, port, LLDP_PREFIX + sw, "lldp", port, 0, "other")
                try:
                    self.pkt_out(sw, pkt, port)
                except UnknownSwitch:
                    break

    def on_event(self, ev):
        rates = None
        if isinstance(ev, PortStats):
            prev = self._last.get((ev.switch, ev.port))
            self._last[(ev.switch, ev.port)] = (ev.at, ev.tx_bytes)
            if prev is None or ev.at <= prev[0]:
                return
            rates = {(ev.switch, ev.port): (ev.tx_bytes - prev[1]) * 8.0 / (ev.at - prev[0])}
        state, puts, deletes = topology_handle_event(self.state, ev, self.version, rates)
        for k in deletes:
            self.delete(NS, k)
        for k, d in puts.items():
            self.put(NS, k, d)
        self.state = state


class TopologyV1(Topology):
    descriptor = AppDescriptor("topology", "v1", ((NS, "ns_v0"),),
                               event_filter=frozenset({"PortStats"}))


class TopologyV2(Topology):
    descriptor = AppDescriptor("topology", "v2", ((NS, "ns_v1"),))
