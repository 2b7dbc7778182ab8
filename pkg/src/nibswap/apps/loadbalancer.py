"""Connection-level load balancer behind a virtual IP.

Every new connection to the VIP reaches the controller, which picks a server,
records the choice in ``lb_conn`` and installs a rewrite rule for that
connection.  v1 picks uniformly at random; v2 picks the least-loaded server
(lowest id on ties) and refuses connections once every server is at ``cap_c``.
Recorded connections are never remapped.
"""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field

from .. import policy as P
from ..errors import NoServers
from .base import App, AppDescriptor

log = logging.getLogger(__name__)

NS = "lb_conn"
CONFIG_KEY = "config"
REJECT = None


def conn_key(client_ip, client_port) -> str:
    return f"conn_{client_ip}_{client_port}"


@dataclass(frozen=True)
class LbState:
    conns: dict = field(default_factory=dict)

    def counts(self, servers) -> dict:
        out = {s["id"]: 0 for s in servers}
        for d in self.conns.values():
            if d.get("server") in out:
                out[d["server"]] += 1
        return out


def lb_handle_connection(state: LbState, conn, config: dict, version: str, rng=None):
    """Returns ``(state, server_id)``; ``server_id`` is ``None`` for a refused connection."""
    client_ip, client_port = conn
    key = conn_key(client_ip, client_port)
    if key in state.conns:
        return state, state.conns[key].get("server")
    servers = config.get("servers") or []
    if not servers:
        raise NoServers("no servers configured")
    if version == "v1":
        choice = (rng or random).choice(sorted(s["id"] for s in servers))
    else:
        counts = state.counts(servers)
        cap = config.get("cap_c")
        eligible = [sid for sid in sorted(counts) if cap is None or counts[sid] < cap]
        choice = min(eligible, key=lambda sid: (counts[sid], sid)) if eligible else REJECT
    conns = dict(state.conns)
    conns[key] = {"client_ip": client_ip, "client_port": client_port, "server": choice}
    return LbState(conns), choice


def lb_policy(state: LbState, config: dict):
    vip = config["vip"]
    client_port = int(config.get("client_port", 1))
    servers = {s["id"]: s for s in config.get("servers", [])}
    rules, known = [], []
    clients = set()
    for key in sorted(state.conns):
        d = state.conns[key]
        m = P.match(dst_ip=vip, src_ip=d["client_ip"], src_port=d["client_port"])
        known.append(m)
        clients.add(d["client_ip"])
        srv = servers.get(d["server"])
        if srv is not None:
            rules.append(P.Seq(P.Filter(m), P.Seq(P.Modify("dst_ip", srv["ip"]),
                                                  P.Modify("port", int(srv["port"])))))
    for ip in sorted(clients):
        rules.append(P.forward(P.match(dst_ip=ip), client_port))
    unknown = P.match(dst_ip=vip)
    if known:
        unknown = P.And(unknown, P.Not(P.disj(*known)))
    return P.union_all(rules + [P.to_controller(unknown)])


class LoadBalancer(App):
    def __init__(self, env, config=None):
        super().__init__(env, config)
        self.switch = self.config.get("switch", "s1")
        self.rng = random.Random(self.config.get("seed", 0))
        self.state = LbState()
        self.lb_config = {}
        self.decisions = []

    def default_config(self) -> dict:
        c = self.config
        return {"vip": c.get("vip", "10.0.0.100"), "client_port": int(c.get("client_port", 1)),
                "servers": list(c.get("servers", [])), "cap_c": c.get("cap_c"),
                "strategy": "random" if self.version == "v1" else "least_loaded"}

    def startup(self):
        docs = self.load(NS)
        self.lb_config = docs.pop(CONFIG_KEY, None)
        if self.lb_config is None:
            self.lb_config = self.default_config()
            self.put(NS, CONFIG_KEY, self.lb_config)
        self.state = LbState(docs)
        yield
        self.push(lb_policy(self.state, self.lb_config))

    def on_event(self, ev):
        if type(ev).__name__ != "PacketIn" or ev.switch != self.switch:
            return
        pkt = ev.packet
        if pkt.proto != "tcp" or pkt.dst_ip != self.lb_config["vip"]:
            return
        key = conn_key(pkt.src_ip, pkt.src_port)
        fresh = key not in self.state.conns
        state, server = lb_handle_connection(self.state, (pkt.src_ip, pkt.src_port),
                                             self.lb_config, self.version, self.rng)
        self.state = state
        if fresh:
            self.decisions.append((self.now(), key, server))
            self.put(NS, key, state.conns[key])
            self.push(lb_policy(self.state, self.lb_config))
        if server is REJECT:
            return
        srv = next(s for s in self.lb_config["servers"] if s["id"] == server)
        self.pkt_out(ev.switch, pkt._replace(dst_ip=srv["ip"]), int(srv["port"]))


class LoadBalancerV1(LoadBalancer):
    descriptor = AppDescriptor("lb", "v1", ((NS, "ns_v0"),), "forwarding", frozenset({"PortStats"}))


class LoadBalancerV2(LoadBalancer):
    descriptor = AppDescriptor("lb", "v2", ((NS, "ns_v0"),), "forwarding", frozenset({"PortStats"}))
