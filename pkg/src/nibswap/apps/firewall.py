"""Stateful firewall in three versions.

v1 opens a pair as soon as the trusted side sends.  v2 only opens it once
the untrusted side answers; until then the pair waits in ``fw_pending``.  v3
behaves like v2 and additionally expires pairs whose packet count stopped
growing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .. import policy as P
from ..platform import STATS_NS
from .base import App, AppDescriptor

log = logging.getLogger(__name__)

V1, V2, V3 = "v1", "v2", "v3"
ALLOWED, PENDING = "fw_allowed", "fw_pending"


def pair_key(trusted_ip, trusted_port, untrusted_ip, untrusted_port) -> str:
    return f"{trusted_ip}_{trusted_port}_{untrusted_ip}_{untrusted_port}"


def doc_key(doc) -> str:
    return pair_key(doc["trusted_ip"], doc["trusted_port"], doc["untrusted_ip"], doc["untrusted_port"])


@dataclass(frozen=True)
class FwState:
    allowed: dict = field(default_factory=dict)
    pending: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FwDelta:
    verdict: str  # "forward" or "drop" or "ignore"
    out_port: int | None = None
    added_allowed: tuple = ()
    added_pending: tuple = ()
    removed_pending: tuple = ()

    @property
    def rules_changed(self) -> bool:
        return bool(self.added_allowed)


def _orient(pkt, trusted_port, untrusted_port):
    if pkt.port == trusted_port:
        return "out", (pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port)
    if pkt.port == untrusted_port:
        return "in", (pkt.dst_ip, pkt.dst_port, pkt.src_ip, pkt.src_port)
    return None, None


def _new_doc(pair, version, now):
    tip, tport, uip, uport = pair
    doc = {"trusted_ip": tip, "trusted_port": tport, "untrusted_ip": uip, "untrusted_port": uport}
    if version == V3:
        doc["last_count"] = 0
        doc["time_created"] = now
    return doc


def firewall_handle_packet(state: FwState, pkt, version: str, now: float = 0.0,
                           trusted_port: int = 1, untrusted_port: int = 2):
    """Classifies one PacketIn; returns the new state and what to do with the packet."""
    if pkt.proto not in ("tcp", "udp"):
        return state, FwDelta("ignore")
    direction, pair = _orient(pkt, trusted_port, untrusted_port)
    if direction is None:
        return state, FwDelta("ignore")
    key = pair_key(*pair)
    out = untrusted_port if direction == "out" else trusted_port
    if key in state.allowed:
        return state, FwDelta("forward", out)
    if direction == "out":
        if version == V1:
            allowed = dict(state.allowed)
            allowed[key] = _new_doc(pair, version, now)
            return FwState(allowed, dict(state.pending)), FwDelta("forward", out, added_allowed=(key,))
        if key in state.pending:
            return state, FwDelta("forward", out)
        pending = dict(state.pending)
        pending[key] = _new_doc(pair, version, now)
        return FwState(dict(state.allowed), pending), FwDelta("forward", out, added_pending=(key,))
    if version != V1 and key in state.pending:
        pending = dict(state.pending)
        doc = pending.pop(key)
        allowed = dict(state.allowed)
        allowed[key] = doc
        return FwState(allowed, pending), FwDelta("forward", out, added_allowed=(key,),
                                                  removed_pending=(key,))
    return state, FwDelta("drop")


def firewall_timeout_sweep(state: FwState, now: float, counts: dict, N: float = 3.0):
    """Keeps pairs whose packet count grew since the last sweep; drops the rest.

    ``counts`` maps pair key to the current packet count.  Pairs younger than
    one period are left alone.  Returns ``(state, removed_keys)``.
    """
    removed = []
    tables = []
    for table in (state.allowed, state.pending):
        kept = {}
        for key, doc in table.items():
            count = counts.get(key, 0)
            if count > doc.get("last_count", 0):
                doc = dict(doc, last_count=count, time_created=now)
                kept[key] = doc
            elif now - doc.get("time_created", now) < N:
                kept[key] = doc
            else:
                removed.append(key)
        tables.append(kept)
    return FwState(*tables), tuple(removed)


def firewall_policy(state: FwState, trusted_port: int = 1, untrusted_port: int = 2):
    """Bidirectional forwarding for allowed pairs; everything else goes to the controller."""
    rules, preds = [], []
    for key in sorted(state.allowed):
        d = state.allowed[key]
        out_m = P.match(port=trusted_port, src_ip=d["trusted_ip"], src_port=d["trusted_port"],
                        dst_ip=d["untrusted_ip"], dst_port=d["untrusted_port"])
        in_m = P.match(port=untrusted_port, src_ip=d["untrusted_ip"], src_port=d["untrusted_port"],
                       dst_ip=d["trusted_ip"], dst_port=d["trusted_port"])
        rules += [P.forward(out_m, untrusted_port), P.forward(in_m, trusted_port)]
        preds += [out_m, in_m]
    if not rules:
        return P.to_controller()
    return P.Union(P.union_all(rules), P.to_controller(P.Not(P.disj(*preds))))


class Firewall(App):
    version_label = V1

    def __init__(self, env, config=None):
        super().__init__(env, config)
        self.switch = self.config.get("switch", "s1")
        self.trusted_port = int(self.config.get("trusted_port", 1))
        self.untrusted_port = int(self.config.get("untrusted_port", 2))
        self.sweep_period = float(self.config.get("N", 3.0))
        self.state = FwState()
        self.drops = []

    def startup(self):
        allowed = self.load(ALLOWED)
        pending = self.load(PENDING) if self.version != V1 else {}
        self.state = FwState(allowed, pending)
        yield
        self.push(self.policy())

    def policy(self):
        return firewall_policy(self.state, self.trusted_port, self.untrusted_port)

    def on_event(self, ev):
        if type(ev).__name__ != "PacketIn" or ev.switch != self.switch:
            return
        state, delta = firewall_handle_packet(self.state, ev.packet, self.version, self.now(),
                                              self.trusted_port, self.untrusted_port)
        self._persist(state, delta)
        self.state = state
        if delta.rules_changed:
            self.push(self.policy())
        if delta.verdict == "forward":
            self.pkt_out(ev.switch, ev.packet, delta.out_port)
        elif delta.verdict == "drop":
            self.drops.append((self.now(), ev.packet))
            log.info("fw %s dropped unsolicited %s", self.version, ev.packet)

    def _persist(self, state, delta):
        for key in delta.removed_pending:
            self.delete(PENDING, key)
        for key in delta.added_pending:
            self.put(PENDING, key, state.pending[key])
        for key in delta.added_allowed:
            self.put(ALLOWED, key, state.allowed[key])


class FirewallV1(Firewall):
    descriptor = AppDescriptor("fw", V1, ((ALLOWED, "ns_v0"),), "filtering",
                               frozenset({"PortStats"}))


class FirewallV2(Firewall):
    descriptor = AppDescriptor("fw", V2, ((ALLOWED, "ns_v0"), (PENDING, "ns_v0")), "filtering",
                               frozenset({"PortStats"}))


class FirewallV3(Firewall):
    descriptor = AppDescriptor("fw", V3, ((ALLOWED, "ns_v1"), (PENDING, "ns_v1"),
                                          (STATS_NS, "ns_v0")), "filtering",
                               frozenset({"PortStats"}))

    def timers(self):
        return {"sweep": self.sweep_period}

    def packet_counts(self) -> dict:
        """Packets seen in either direction for each tracked pair, from the stats namespace."""
        docs = self.load(STATS_NS, f"{self.switch}_*")
        counts = {}
        for d in docs.values():
            for key in (pair_key(d["src_ip"], d["src_port"], d["dst_ip"], d["dst_port"]),
                        pair_key(d["dst_ip"], d["dst_port"], d["src_ip"], d["src_port"])):
                counts[key] = counts.get(key, 0) + d["packets"]
        return counts

    def on_sweep(self):
        before = self.state
        state, removed = firewall_timeout_sweep(before, self.now(), self.packet_counts(),
                                                self.sweep_period)
        for table, ns in ((state.allowed, ALLOWED), (state.pending, PENDING)):
            old = before.allowed if ns == ALLOWED else before.pending
            for key, doc in table.items():
                if old.get(key) != doc:
                    self.put(ns, key, doc)
        for key in removed:
            self.delete(ALLOWED if key in before.allowed else PENDING, key)
        self.state = state
        if any(k in before.allowed for k in removed):
            self.push(self.policy())
