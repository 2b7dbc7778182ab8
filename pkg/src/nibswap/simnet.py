"""Tick-based network simulator: switches running flow tables, hosts, links and TCP-ish flows.

Every tick (0.1 s) each live flow sends one packet per direction through the
installed tables.  Packets that match nothing, or whose rule outputs to
``CONTROLLER``, are handed to the controller as ``PacketIn`` events; the
handler runs synchronously and may re-inject packets with :meth:`packet_out`.
A flow whose packets get through in both directions is *active* for the tick
and gets its max-min fair share of the links on its forward path.  Failed
attempts back off like a TCP retransmission timer.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import TopologyError, UnknownSwitch
from .events import PacketIn, PortStats, SwitchDown, SwitchUp
from .policy import CONTROLLER, FlowTable, Packet

log = logging.getLogger(__name__)

TICKS_PER_SECOND = 10
TICK = 1.0 / TICKS_PER_SECOND
LLDP_PREFIX = "lldp:"


@dataclass(frozen=True)
class Host:
    id: str
    ip: str
    switch: str
    port: int
    capacity_bps: float = 1e6


@dataclass(frozen=True)
class Link:
    a: tuple
    b: tuple
    capacity_bps: float = 1e6


class Topology:
    def __init__(self, switches, hosts=(), links=()):
        self.switches = sorted(set(switches))
        self.hosts = {}
        self.links = []
        self._peer = {}
        for link in links:
            self._add_link(link)
        for h in hosts:
            self.add_host(h)

    def _claim(self, end, other, cap):
        node, port = end
        if (node, port) in self._peer:
            raise TopologyError(f"port {port} of {node} used twice")
        self._peer[(node, port)] = (other[0], other[1], cap)

    def _add_link(self, link: Link):
        for node, _ in (link.a, link.b):
            if node not in self.switches:
                raise TopologyError(f"link endpoint {node!r} is not a switch")
        self._claim(link.a, link.b, link.capacity_bps)
        self._claim(link.b, link.a, link.capacity_bps)
        self.links.append(link)

    def add_host(self, h: Host):
        if h.id in self.hosts or h.id in self.switches:
            raise TopologyError(f"duplicate node id {h.id!r}")
        if h.switch not in self.switches:
            raise TopologyError(f"host {h.id!r} attached to unknown switch {h.switch!r}")
        if any(o.ip == h.ip for o in self.hosts.values()):
            raise TopologyError(f"duplicate host ip {h.ip}")
        self._claim((h.switch, h.port), (h.id, 0), h.capacity_bps)
        self._claim((h.id, 0), (h.switch, h.port), h.capacity_bps)
        self.hosts[h.id] = h

    def peer(self, node, port):
        """(node, port, capacity) on the far side of ``node:port``, or None."""
        return self._peer.get((node, port))

    def ports(self, sw) -> tuple:
        return tuple(sorted((p, cap) for (n, p), (_, _, cap) in self._peer.items() if n == sw))

    def host_by_ip(self, ip):
        for h in self.hosts.values():
            if h.ip == ip:
                return h
        return None

    def is_host(self, node) -> bool:
        return node in self.hosts

    def to_json(self) -> dict:
        return {
            "switches": list(self.switches),
            "hosts": [{"id": h.id, "ip": h.ip, "switch": h.switch, "port": h.port,
                       "capacity_bps": h.capacity_bps} for h in self.hosts.values()],
            "links": [{"a": list(l.a), "b": list(l.b), "capacity_bps": l.capacity_bps}
                      for l in self.links],
        }


def build_topology(spec) -> Topology:
    """Accepts a dict, a JSON string or a path to a JSON file."""
    if isinstance(spec, Path) or (isinstance(spec, str) and not spec.lstrip().startswith("{")):
        spec = json.loads(Path(spec).read_text())
    elif isinstance(spec, str):
        spec = json.loads(spec)
    try:
        switches = spec["switches"]
        hosts = [Host(h["id"], h["ip"], h["switch"], int(h["port"]),
                      float(h.get("capacity_bps", 1e6))) for h in spec.get("hosts", [])]
        links = [Link(tuple(l["a"]), tuple(l["b"]), float(l.get("capacity_bps", 1e6)))
                 for l in spec.get("links", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise TopologyError(f"malformed topology spec: {exc!r}") from exc
    if not isinstance(switches, list) or not switches:
        raise TopologyError("topology needs a non-empty switch list")
    return Topology(switches, hosts, links)


def max_min_fair(paths: dict, capacity: dict) -> dict:
    """Max-min fair rates for flows given as ``{flow: [link, ...]}`` (progressive filling)."""
    rates = {}
    remaining = {l: float(capacity[l]) for ls in paths.values() for l in ls}
    active = {f for f, ls in paths.items() if ls}
    for f, ls in paths.items():
        if not ls:
            rates[f] = 0.0
    while active:
        count = defaultdict(int)
        for f in active:
            for l in set(paths[f]):
                count[l] += 1
        level = min(max(remaining[l], 0.0) / n for l, n in count.items())
        tight = {l for l, n in count.items() if max(remaining[l], 0.0) / n <= level * (1 + 1e-12)}
        frozen = {f for f in active if tight & set(paths[f])}
        for f in frozen:
            rates[f] = level
            for l in set(paths[f]):
                remaining[l] -= level
        active -= frozen
    return rates


@dataclass
class Flow:
    id: str
    src_host: str
    dst_ip: str
    dst_port: int
    src_port: int
    start: float = 0.0
    proto: str = "tcp"
    dst_host: str | None = None
    state: str = "connecting"
    path_history: list = field(default_factory=list)
    bytes_acked: float = 0.0
    bucket_bytes: float = 0.0
    fwd_drops: int = 0
    rev_drops: int = 0
    reset_reason: str | None = None
    next_attempt: float = 0.0
    rto: float = 1.0
    blocked_since: float | None = None
    seen_by: set = field(default_factory=set)
    series: list = field(default_factory=list)
    states: list = field(default_factory=list)
    paths: list = field(default_factory=list)

    @property
    def live(self) -> bool:
        return self.state in ("connecting", "established")

    @property
    def current_path(self):
        return self.path_history[-1] if self.path_history else None


class Simulator:
    def __init__(self, topo: Topology, handler=None, *, conn_timeout: float = 5.0,
                 rto_initial: float = 1.0, rto_max: float = 8.0, hop_limit: int = 32):
        self.topo = topo
        self.handler = handler
        self.conn_timeout = conn_timeout
        self.rto_initial = rto_initial
        self.rto_max = rto_max
        self.hop_limit = hop_limit
        self.tick = 0
        self.up = set()
        self.tables = {}
        self.flows = {}
        self.port_tx = defaultdict(float)
        self.port_rx = defaultdict(float)
        self.flow_packets = defaultdict(int)
        self.flow_bytes = defaultdict(float)
        self.packet_ins = 0
        self.dropped = 0
        self.misdelivered = 0
        self.delivered = []
        self._events = []
        self._recording = None
        self._trace = None
        self.delivery_hooks = []
        self.install_log = []

    # ---------------------------------------------------------------- time

    @property
    def now(self) -> float:
        return self.tick / TICKS_PER_SECOND

    # ------------------------------------------------------------ switches

    def _emit(self, ev):
        self._events.append(ev)
        if isinstance(ev, PacketIn):
            self.packet_ins += 1
            if self._recording is not None:
                self._recording.append(ev)
        if self.handler is not None:
            self.handler(ev)

    def start(self):
        """Brings every switch up, then lets every host announce itself."""
        for sw in self.topo.switches:
            self.switch_up(sw)
        for h in sorted(self.topo.hosts.values(), key=lambda h: h.id):
            self.announce(h.id)

    def switch_up(self, sw):
        if sw not in self.topo.switches:
            raise UnknownSwitch(sw)
        if sw in self.up:
            return
        self.up.add(sw)
        self._emit(SwitchUp(sw, self.topo.ports(sw)))

    def reconnect(self):
        """Every live switch re-announces itself, as after a controller restart."""
        for sw in sorted(self.up):
            self._emit(SwitchUp(sw, self.topo.ports(sw)))

    def switch_down(self, sw):
        if sw not in self.up:
            raise UnknownSwitch(sw)
        self.up.discard(sw)
        self.tables.pop(sw, None)
        for key in [k for k in self.port_tx if k[0] == sw]:
            del self.port_tx[key]
        for key in [k for k in self.port_rx if k[0] == sw]:
            del self.port_rx[key]
        for key in [k for k in self.flow_packets if k[0] == sw]:
            del self.flow_packets[key]
            self.flow_bytes.pop(key, None)
        self._emit(SwitchDown(sw))

    def add_host(self, host: Host, announce: bool = True):
        self.topo.add_host(host)
        if announce:
            self.announce(host.id)

    def announce(self, host_id):
        """Gratuitous broadcast from a host, which lets the controller learn it."""
        h = self.topo.hosts[host_id]
        pkt = Packet(h.switch, h.port, h.ip, "255.255.255.255", 0, 0, "other")
        self._ingress(h, pkt)

    def install(self, tables: dict):
        """Replaces the tables of the given switches in one step."""
        for sw, table in tables.items():
            if sw in self.up:
                self.tables[sw] = table
        self.install_log.append((self.now, {sw: t.signature() for sw, t in tables.items()}))

    def table(self, sw) -> FlowTable | None:
        return self.tables.get(sw)

    def port_stats(self, sw) -> list:
        if sw not in self.up:
            raise UnknownSwitch(sw)
        return [PortStats(sw, p, int(self.port_tx[(sw, p)]), int(self.port_rx[(sw, p)]), self.now)
                for p, _ in self.topo.ports(sw)]

    def flow_counters(self) -> dict:
        """{(switch, src_ip, src_port, dst_ip, dst_port, proto): (packets, bytes)} for rule-matched traffic."""
        return {k: (n, int(self.flow_bytes.get(k, 0))) for k, n in sorted(self.flow_packets.items())}

    # ------------------------------------------------------------- packets

    def _ingress(self, host: Host, pkt: Packet, hops: int = 0):
        if self._trace is not None:
            self._trace["links"].append((host.id, 0))
        self._arrive(host.switch, host.port, pkt, hops)

    def _arrive(self, sw, in_port, pkt: Packet, hops: int):
        if sw not in self.up:
            self.dropped += 1
            return
        if hops > self.hop_limit:
            log.warning("hop limit exceeded for %s", pkt)
            self.dropped += 1
            return
        pkt = pkt._replace(switch=sw, port=in_port)
        if pkt.src_ip.startswith(LLDP_PREFIX):
            self._emit(PacketIn(sw, in_port, pkt))
            return
        table = self.tables.get(sw)
        outs = table.apply(pkt) if table is not None else None
        if outs is None:
            self._emit(PacketIn(sw, in_port, pkt))
            return
        key = (sw, pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, pkt.proto)
        self.flow_packets[key] += 1
        if self._trace is not None:
            self._trace["hits"].append(key)
        if not outs:
            self.dropped += 1
            return
        for out in sorted(outs):
            if out.port == CONTROLLER:
                self._emit(PacketIn(sw, in_port, pkt))
            else:
                self._send_out(sw, out.port, out, hops + 1)

    def _send_out(self, sw, port, pkt: Packet, hops: int):
        peer = self.topo.peer(sw, port)
        if peer is None:
            self.dropped += 1
            return
        node, pport, _ = peer
        if self._trace is not None:
            self._trace["links"].append((sw, port))
        if node in self.topo.hosts:
            self._deliver(self.topo.hosts[node], pkt)
        else:
            self._arrive(node, pport, pkt, hops)

    def packet_out(self, sw, pkt: Packet, port: int):
        """Controller-injected packet leaving ``sw`` on ``port``."""
        if sw not in self.up:
            raise UnknownSwitch(sw)
        if port == CONTROLLER:
            return
        self._send_out(sw, port, pkt._replace(switch=sw, port=port), 0)

    def _flow_of(self, host: Host, pkt: Packet):
        for f in self.flows.values():
            client = self.topo.hosts[f.src_host]
            if pkt.proto != f.proto:
                continue
            if pkt.src_ip == client.ip and pkt.src_port == f.src_port:
                return f, "fwd"
            if pkt.dst_ip == client.ip and pkt.dst_port == f.src_port:
                return f, "rev"
        return None, None

    def _deliver(self, host: Host, pkt: Packet):
        if pkt.proto == "other":
            return
        if pkt.dst_ip != host.ip:
            self.misdelivered += 1
            return
        self.delivered.append((self.now, host.id, pkt))
        flow, direction = self._flow_of(host, pkt)
        for hook in self.delivery_hooks:
            hook(host, pkt, flow, direction)
        if flow is None:
            return
        if self._trace is not None and self._trace["flow"] is flow and self._trace["dir"] == direction:
            self._trace["delivered"] = True
        if direction == "fwd":
            if flow.dst_host is None:
                flow.dst_host = host.id
            if host.id not in flow.seen_by:
                if flow.state == "established":
                    self._reset(flow, f"affinity: {host.id} never saw the connection")
                    return
                flow.seen_by.add(host.id)

    def _reset(self, flow: Flow, reason: str):
        if flow.live:
            flow.state = "reset"
            flow.reset_reason = reason
            log.info("t=%.1f flow %s reset (%s)", self.now, flow.id, reason)

    # --------------------------------------------------------------- flows

    def add_flow(self, flow: Flow) -> Flow:
        if flow.src_host not in self.topo.hosts:
            raise TopologyError(f"unknown host {flow.src_host!r}")
        if flow.id in self.flows:
            raise ValueError(f"duplicate flow id {flow.id!r}")
        flow.next_attempt = max(flow.start, self.now)
        flow.rto = self.rto_initial
        # buckets are indexed by absolute second; pad the ones that already closed
        missing = self.tick // TICKS_PER_SECOND - len(flow.series)
        flow.series.extend([0.0] * missing)
        flow.states.extend([flow.state] * missing)
        flow.paths.extend([""] * missing)
        self.flows[flow.id] = flow
        return flow

    def _packet(self, flow: Flow, direction: str):
        client = self.topo.hosts[flow.src_host]
        if direction == "fwd":
            return client, Packet(client.switch, client.port, client.ip, flow.dst_ip,
                                  flow.src_port, flow.dst_port, flow.proto)
        server = self.topo.hosts[flow.dst_host]
        return server, Packet(server.switch, server.port, server.ip, client.ip,
                              flow.dst_port, flow.src_port, flow.proto)

    def _send(self, flow: Flow, direction: str):
        host, pkt = self._packet(flow, direction)
        outer = self._trace
        self._trace = {"flow": flow, "dir": direction, "delivered": False, "links": [], "hits": []}
        try:
            self._ingress(host, pkt)
            trace = self._trace
        finally:
            self._trace = outer
        if not trace["delivered"]:
            if direction == "fwd":
                flow.fwd_drops += 1
            else:
                flow.rev_drops += 1
        return trace

    def _attempt(self, flow: Flow):
        if flow.state == "connecting":
            fwd = self._send(flow, "fwd")
            ok = fwd["delivered"] and flow.live
            if ok:
                ok = self._send(flow, "rev")["delivered"]
        else:
            rev = self._send(flow, "rev")
            fwd = self._send(flow, "fwd")
            ok = rev["delivered"] and fwd["delivered"]
        return (ok and flow.live), fwd

    def step(self, until: float | None = None) -> list:
        """Advances one tick (or ticks until ``until``); returns the events emitted
        since the previous call."""
        end_tick = self.tick + 1 if until is None else round(until * TICKS_PER_SECOND)
        while self.tick < end_tick:
            self._tick()
        out, self._events = self._events, []
        return out

    def _tick(self):
        now = self.now
        active = {}
        for flow in sorted(self.flows.values(), key=lambda f: f.id):
            if not flow.live or now + 1e-9 < flow.next_attempt:
                continue
            ok, fwd = self._attempt(flow)
            if ok:
                flow.state = "established"
                flow.rto = self.rto_initial
                flow.blocked_since = None
                flow.next_attempt = now + TICK
                path = tuple(fwd["links"])
                if not flow.path_history or flow.path_history[-1] != path:
                    flow.path_history.append(path)
                active[flow.id] = (path, fwd["hits"])
            elif flow.live:
                if flow.blocked_since is None:
                    flow.blocked_since = now
                flow.next_attempt = now + flow.rto
                flow.rto = min(flow.rto * 2, self.rto_max)
        for flow in self.flows.values():
            if (flow.state == "established" and flow.blocked_since is not None
                    and now - flow.blocked_since >= self.conn_timeout - 1e-9):
                self._reset(flow, "connection timeout")
        cap = {}
        for path, _ in active.values():
            for node, port in path:
                cap[(node, port)] = self.topo.peer(node, port)[2]
        rates = max_min_fair({fid: list(p) for fid, (p, _) in active.items()}, cap)
        for fid, rate in rates.items():
            nbytes = rate * TICK / 8.0
            flow = self.flows[fid]
            flow.bytes_acked += nbytes
            flow.bucket_bytes += nbytes
            path, hits = active[fid]
            for node, port in path:
                if node in self.up:
                    self.port_tx[(node, port)] += nbytes
                pn, pp, _ = self.topo.peer(node, port)
                if pn in self.up:
                    self.port_rx[(pn, pp)] += nbytes
            for key in hits:
                self.flow_bytes[key] += nbytes
        self.tick += 1
        if self.tick % TICKS_PER_SECOND == 0:
            self._close_bucket()

    def _close_bucket(self):
        for flow in self.flows.values():
            flow.series.append(flow.bucket_bytes * 8.0)
            flow.bucket_bytes = 0.0
            flow.states.append(flow.state)
            flow.paths.append(self.path_label(flow.current_path))

    def path_label(self, path) -> str:
        if not path:
            return ""
        return "-".join(n for n, _ in path if n in self.topo.switches)

    # ------------------------------------------------------ record / replay

    def record(self, sink: list | None = None) -> list:
        self._recording = [] if sink is None else sink
        return self._recording

    def stop_recording(self) -> list:
        rec, self._recording = self._recording, None
        return rec or []

    def replay(self, trace) -> int:
        """Re-presents recorded PacketIns to the controller, in order."""
        n = 0
        for ev in trace:
            if self.handler is not None:
                self.handler(ev)
            n += 1
        return n

    # -------------------------------------------------------------- output

    def metrics_rows(self):
        for b in range(self.tick // TICKS_PER_SECOND):
            for fid in sorted(self.flows):
                f = self.flows[fid]
                if b < len(f.series):
                    yield (b, fid, f.series[b], f.paths[b], f.states[b])

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "flow_id", "bps", "path", "state"])
        for t, fid, bps, path, state in self.metrics_rows():
            w.writerow([t, fid, f"{bps:.1f}", path, state])
        return buf.getvalue()
