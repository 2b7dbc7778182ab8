"""Proactive shortest-path routing over the discovered topology.

v1 uses hop counts.  v2 uses the topology's edge weights and assigns host
pairs one after another, accounting for the load each placed pair adds, so
that two heavy pairs sharing a congested path get split.  Its first
computation has no previous assignment to work from and reduces to plain
weighted shortest paths, which with all weights at 1 are exactly the v1 routes.
"""
from __future__ import annotations

import heapq
import logging

from .. import policy as P
from ..platform import STATS_NS
from .base import App, AppDescriptor
from .topology import NS as TOPO_NS, TopoState

log = logging.getLogger(__name__)


def graph_of(docs: dict):
    """(switches, adjacency {u: [(v, out_port, edge_key, weight, capacity)]}, hosts {ip: (sw, port)})."""
    st = TopoState(docs)
    switches = set(st.switches())
    adj = {sw: [] for sw in switches}
    for k, e in sorted(st.edges().items()):
        if e["src"] in switches and e["dst"] in switches:
            adj[e["src"]].append((e["dst"], e["src_port"], k, float(e.get("weight", 1)),
                                  float(e.get("capacity", 1e6))))
    hosts = {ip: tuple(h["attachment"]) for ip, h in st.hosts().items() if h["attachment"][0] in switches}
    return switches, adj, hosts


def shortest_path(adj, src, dst, cost=None):
    """Least-cost switch path; equal costs resolve to the lexicographically smallest path,
    i.e. the smallest next-hop switch id first.  Returns a list of (switch, out_port, edge_key)."""
    if src == dst:
        return []
    cost = cost or (lambda key, w: 1.0)
    heap = [(0.0, (src,), ())]
    done = set()
    while heap:
        c, path, hops = heapq.heappop(heap)
        u = path[-1]
        if u in done:
            continue
        done.add(u)
        if u == dst:
            return list(hops)
        for v, port, key, w, _ in adj.get(u, ()):
            if v not in done:
                nc = round(c + cost(key, w), 9)
                heapq.heappush(heap, (nc, path + (v,), hops + ((u, port, key),)))
    return None


def pairs_of(hosts) -> list:
    return [(a, b) for a in sorted(hosts) for b in sorted(hosts) if a != b]


def _valid(hops, adj) -> bool:
    keys = {k for out in adj.values() for _, _, k, _, _ in out}
    return all(k in keys for _, _, k in hops)


def assign_paths(docs, demands=None, previous=None, weighted=False, pinned=False):
    """Chooses a switch path for every ordered host pair.

    ``demands`` maps (src_ip, dst_ip) to bits/s; ``previous`` is the last
    assignment.  Without a previous assignment each pair simply takes its
    least-cost path.  With one, pairs are placed heaviest first; a pair does not
    count its own current load against its current path, and every placement
    moves the pair's load onto the edges it now uses.  With ``pinned`` every pair
    whose previous path still exists keeps it.
    """
    switches, adj, hosts = graph_of(docs)
    load = {}
    cap = {}
    for u, out in adj.items():
        for v, port, key, w, c in out:
            load[key] = w if weighted else 1.0
            cap[key] = c
    demands = demands or {}
    sequential = weighted and previous is not None
    order = pairs_of(hosts)
    if sequential:
        order.sort(key=lambda p: (-demands.get(p, 0.0), p))
    paths = {}
    for a, b in order:
        (sa, _), (sb, _) = hosts[a], hosts[b]
        old = (previous or {}).get((a, b))
        if pinned and old is not None and _valid(old, adj):
            paths[(a, b)] = old
            continue
        d = demands.get((a, b), 0.0) if sequential else 0.0
        prev = {k for _, _, k in (previous or {}).get((a, b)) or ()} if sequential else set()

        def cost(key, w, prev=prev, d=d):
            c = load[key] - (d / cap[key] if key in prev else 0.0)
            return max(c, 1.0)

        hops = shortest_path(adj, sa, sb, cost)
        if hops is None:
            log.info("no route %s -> %s", a, b)
            continue
        paths[(a, b)] = hops
        if d:
            now = {k for _, _, k in hops}
            for k in now - prev:
                load[k] += d / cap[k]
            for k in prev - now:
                load[k] = max(1.0, load[k] - d / cap[k])
    return paths, hosts


def routing_policy(paths: dict, hosts: dict):
    """Forwarding rules for every routed pair; unmatched traffic goes to the controller."""
    rules, preds = [], []
    for (a, b), hops in sorted(paths.items()):
        for sw, port, _ in hops:
            m = P.match(switch=sw, src_ip=a, dst_ip=b)
            rules.append(P.forward(m, port))
            preds.append(m)
        last_sw, host_port = hosts[b]
        m = P.match(switch=last_sw, src_ip=a, dst_ip=b)
        rules.append(P.forward(m, host_port))
        preds.append(m)
    if not rules:
        return P.to_controller()
    return P.Union(P.union_all(rules), P.to_controller(P.Not(P.disj(*preds))))


def routing_recompute(topology_docs: dict, version: str, demands=None, previous=None, pinned=False):
    """Returns ``(policy, paths)`` for the given topology documents."""
    paths, hosts = assign_paths(topology_docs, demands, previous, weighted=(version != "v1"),
                                pinned=pinned)
    return routing_policy(paths, hosts), paths


def pair_demands(stats_docs: dict, hosts: dict) -> dict:
    """Bits/s per (src_ip, dst_ip), measured at the source host's switch."""
    out = {}
    for d in stats_docs.values():
        a, b = d["src_ip"], d["dst_ip"]
        if a in hosts and b in hosts and hosts[a][0] == d["switch"]:
            out[(a, b)] = out.get((a, b), 0.0) + float(d.get("bps", 0.0))
    return out


class Routing(App):
    def __init__(self, env, config=None):
        super().__init__(env, config)
        self.paths = None
        self.current = None
        self.dirty = False
        self.recomputes = 0
        self.history = []
        # after moving a pair, hold existing routes until link weights catch up
        self.hold_down = float(self.config.get("hold_down", 5.0))
        self.last_move = None

    def startup(self):
        yield
        self.recompute(force=True)

    def demands(self, docs):
        return {}

    def recompute(self, force=False):
        docs = self.load(TOPO_NS)
        previous = self.paths
        pinned = self.last_move is not None and self.now() - self.last_move < self.hold_down
        pol, paths = routing_recompute(docs, self.version, self.demands(docs), previous, pinned)
        if previous is not None and any(previous.get(k) not in (None, v) for k, v in paths.items()):
            self.last_move = self.now()
        self.paths = paths
        self.recomputes += 1
        self.history.append((self.now(), pol))
        if force or pol != self.current:
            self.current = pol
            self.push(pol)

    def on_notification(self, note):
        self.dirty = True

    def idle(self):
        if self.dirty:
            self.dirty = False
            self.recompute()


_ROUTING_FILTER = frozenset({"PortStats", "PacketIn"})


class RoutingV1(Routing):
    descriptor = AppDescriptor("routing", "v1", ((TOPO_NS, "ns_v0"),), "forwarding",
                               _ROUTING_FILTER, ("ns:" + TOPO_NS,))


class RoutingV2(Routing):
    descriptor = AppDescriptor("routing", "v2", ((TOPO_NS, "ns_v1"), (STATS_NS, "ns_v0")),
                               "forwarding", _ROUTING_FILTER, ("ns:" + TOPO_NS,))

    def demands(self, docs):
        _, _, hosts = graph_of(docs)
        return pair_demands(self.load(STATS_NS), hosts)
