import itertools

import pytest
from hypothesis import given, settings, strategies as st

from nibswap import policy as P
from nibswap.apps import REGISTRY, descriptor
from nibswap.apps.firewall import (FwState, firewall_handle_packet, firewall_policy,
                                   firewall_timeout_sweep, pair_key)
from nibswap.apps.loadbalancer import LbState, conn_key, lb_handle_connection, lb_policy
from nibswap.apps.routing import graph_of, routing_recompute, shortest_path
from nibswap.apps.topology import TopoState, edge_key, ema_weight, node_key, topology_handle_event
from nibswap.errors import NoServers
from nibswap.events import PacketIn, PortStats, SwitchDown, SwitchUp
from nibswap.policy import CONTROLLER, Packet

OUT = Packet("s1", 1, "10.0.0.1", "10.0.0.2", 3456, 80)
IN = Packet("s1", 2, "10.0.0.2", "10.0.0.1", 80, 3456)


# ------------------------------------------------------------------ firewall

def test_v1_outbound_opens_pair_with_listed_key():
    st1, d = firewall_handle_packet(FwState(), OUT, "v1")
    key = "10.0.0.1_3456_10.0.0.2_80"
    assert d.verdict == "forward" and d.out_port == 2 and d.added_allowed == (key,)
    assert st1.allowed[key] == {"trusted_ip": "10.0.0.1", "trusted_port": 3456,
                                "untrusted_ip": "10.0.0.2", "untrusted_port": 80}
    table = P.compile_policy(firewall_policy(st1), "s1")
    assert {p.port for p in table.apply(OUT)} == {2}
    assert {p.port for p in table.apply(IN)} == {1}


def test_v2_unsolicited_inbound_is_dropped():
    s0 = FwState()
    s1, d = firewall_handle_packet(s0, IN, "v2")
    assert d.verdict == "drop" and s1 == s0


def test_v2_pending_moves_to_allowed_on_reply():
    s1, d1 = firewall_handle_packet(FwState(), OUT, "v2")
    key = pair_key("10.0.0.1", 3456, "10.0.0.2", 80)
    assert d1.verdict == "forward" and d1.added_pending == (key,) and not d1.rules_changed
    assert key in s1.pending and key not in s1.allowed
    s2, d2 = firewall_handle_packet(s1, IN, "v2")
    assert d2.verdict == "forward" and d2.out_port == 1 and d2.removed_pending == (key,)
    assert key in s2.allowed and key not in s2.pending


def test_v3_documents_carry_count_and_time():
    s1, _ = firewall_handle_packet(FwState(), OUT, "v3", now=7.5)
    (doc,) = s1.pending.values()
    assert doc["last_count"] == 0 and doc["time_created"] == 7.5


def test_sweep_keeps_growing_and_removes_idle():
    key = pair_key("10.0.0.1", 3456, "10.0.0.2", 80)
    idle = pair_key("10.0.0.1", 1, "10.0.0.2", 80)
    base = {"trusted_ip": "x", "trusted_port": 1, "untrusted_ip": "y", "untrusted_port": 2}
    state = FwState({key: dict(base, last_count=5, time_created=0.0),
                     idle: dict(base, last_count=9, time_created=0.0)})
    new, removed = firewall_timeout_sweep(state, 10.0, {key: 8, idle: 9}, N=3.0)
    assert new.allowed[key]["last_count"] == 8 and new.allowed[key]["time_created"] == 10.0
    assert removed == (idle,) and idle not in new.allowed
    assert firewall_timeout_sweep(FwState(), 10.0, {}) == (FwState(), ())


def test_sweep_grace_period_for_young_entries():
    key = pair_key("a", 1, "b", 2)
    state = FwState({key: {"last_count": 0, "time_created": 9.0}})
    new, removed = firewall_timeout_sweep(state, 10.0, {}, N=3.0)
    assert removed == () and key in new.allowed


packets = st.builds(
    lambda inbound, a, b: (Packet("s1", 2, f"10.0.0.{b}", f"10.0.0.{a}", 80, 1000 + a)
                           if inbound else Packet("s1", 1, f"10.0.0.{a}", f"10.0.0.{b}", 1000 + a, 80)),
    st.booleans(), st.integers(1, 3), st.integers(4, 5))


@given(st.lists(packets, max_size=30), st.sampled_from(["v2", "v3"]))
@settings(max_examples=200, deadline=None)
def test_pending_and_allowed_stay_disjoint(pkts, version):
    state = FwState()
    for i, pkt in enumerate(pkts):
        before = state
        state, d = firewall_handle_packet(state, pkt, version, now=float(i))
        assert not set(state.allowed) & set(state.pending)
        if pkt.port == 2:  # inbound is only let through for a pair seen outbound first
            key = pair_key(pkt.dst_ip, pkt.dst_port, pkt.src_ip, pkt.src_port)
            if d.verdict == "forward":
                assert key in before.allowed or key in before.pending


# ------------------------------------------------------------------ topology

def diamond_events():
    caps = {"s1": ((1, 1e7), (2, 1e7), (3, 1e6), (4, 1e6)), "s2": ((1, 1e6), (2, 1e6)),
            "s3": ((1, 1e6), (2, 1e6)), "s4": ((1, 1e7), (2, 1e6), (3, 1e6))}
    evs = [SwitchUp(sw, ports) for sw, ports in caps.items()]
    links = [("s1", 3, "s2", 1), ("s1", 4, "s3", 1), ("s2", 2, "s4", 2), ("s3", 2, "s4", 3)]
    for a, ap, b, bp in links:
        evs.append(PacketIn(b, bp, Packet(b, bp, f"lldp:{a}", "lldp", ap, 0, "other")))
        evs.append(PacketIn(a, ap, Packet(a, ap, f"lldp:{b}", "lldp", bp, 0, "other")))
    for ip, sw, port in (("10.0.0.1", "s1", 1), ("10.0.0.2", "s1", 2), ("10.0.0.3", "s4", 1)):
        evs.append(PacketIn(sw, port, Packet(sw, port, ip, "255.255.255.255", 0, 0, "other")))
    return evs


def learn(version="v1"):
    state = TopoState()
    for ev in diamond_events():
        state, _, _ = topology_handle_event(state, ev, version)
    return state


def test_topology_learns_the_diamond():
    state = learn("v2")
    assert set(state.switches()) == {"s1", "s2", "s3", "s4"}
    assert len(state.edges()) == 8
    assert state.hosts()["10.0.0.3"]["attachment"] == ["s4", 1]
    assert all(e["weight"] == 1 for e in state.edges().values())
    assert all("weight" not in e for e in learn("v1").edges().values())


def test_switch_up_writes_node_and_down_removes_incident_edges():
    s, puts, _ = topology_handle_event(TopoState(), SwitchUp("s9", ((1, 1e6),)), "v1")
    assert node_key("s9") in puts
    state = learn()
    state, _, deletes = topology_handle_event(state, SwitchDown("s2"), "v1")
    assert node_key("s2") in deletes
    assert all("s2" not in (e["src"], e["dst"]) for e in state.edges().values())
    assert len(state.edges()) == 4


def test_ema_step_example():
    assert ema_weight(1.0, 500e3, 1e6) == pytest.approx(1.25)
    state = learn("v2")
    k = edge_key("s1", 3, "s2", 1)
    state, puts, _ = topology_handle_event(state, PortStats("s1", 3, 0, 0, 1.0), "v2",
                                           {("s1", 3): 500e3})
    assert puts[k]["weight"] == pytest.approx(1.25)


def test_ema_never_below_one():
    assert ema_weight(1.0, 0.0, 1e6) == 1.0


# ------------------------------------------------------------------- routing

def brute_force_paths(adj, src, dst, cost):
    """Every loop-free switch path, with its total cost, by plain enumeration."""
    out = []

    def walk(u, seen, hops, c):
        if u == dst:
            out.append((round(c, 9), tuple(h[0] for h in hops) + (dst,), hops))
            return
        for v, port, key, w, _ in adj[u]:
            if v not in seen:
                walk(v, seen | {v}, hops + [(u, port, key)], c + cost(key, w))

    walk(src, {src}, [], 0.0)
    return sorted(out)


def test_equal_weights_pick_lexicographic_path():
    pol, paths = routing_recompute(learn("v1").docs, "v1")
    assert [h[0] for h in paths[("10.0.0.1", "10.0.0.3")]] == ["s1", "s2"]
    assert [h[0] for h in paths[("10.0.0.2", "10.0.0.3")]] == ["s1", "s2"]
    assert pol == routing_recompute(learn("v2").docs, "v2")[0]


def test_heavier_path_is_avoided():
    docs = dict(learn("v2").docs)
    k = edge_key("s1", 3, "s2", 1)
    docs[k] = dict(docs[k], weight=2.0)
    _, paths = routing_recompute(docs, "v2")
    assert [h[0] for h in paths[("10.0.0.1", "10.0.0.3")]] == ["s1", "s3"]


@given(st.lists(st.sampled_from([1.0, 1.25, 1.5, 2.0, 3.0]), min_size=8, max_size=8))
@settings(max_examples=200, deadline=None)
def test_weighted_paths_match_brute_force(weights):
    docs = dict(learn("v2").docs)
    for k, w in zip(sorted(TopoState(docs).edges()), weights):
        docs[k] = dict(docs[k], weight=w)
    _, adj, hosts = graph_of(docs)
    cost = lambda key, w: max(w, 1.0)  # noqa: E731
    for a, b in itertools.permutations(sorted(hosts), 2):
        got = shortest_path(adj, hosts[a][0], hosts[b][0], cost)
        oracle = brute_force_paths(adj, hosts[a][0], hosts[b][0], cost)
        if hosts[a][0] == hosts[b][0]:
            assert got == []
            continue
        assert got == oracle[0][2]
        switches = [h[0] for h in got]
        assert len(switches) == len(set(switches))  # loop-free


def test_routing_policy_forwards_end_to_end_and_punts_the_rest():
    pol, _ = routing_recompute(learn("v1").docs, "v1")
    pkt = Packet("s1", 1, "10.0.0.1", "10.0.0.3", 1, 2)
    hops = []
    for _ in range(5):
        (out,) = P.compile_policy(pol, pkt.switch).apply(pkt)
        hops.append((pkt.switch, out.port))
        nxt = {("s1", 3): ("s2", 1), ("s2", 2): ("s4", 2)}.get((pkt.switch, out.port))
        if nxt is None:
            break
        pkt = out._replace(switch=nxt[0], port=nxt[1])
    assert hops == [("s1", 3), ("s2", 2), ("s4", 1)]
    stray = Packet("s2", 1, "10.9.9.9", "10.0.0.3", 1, 2)
    assert {p.port for p in P.compile_policy(pol, "s2").apply(stray)} == {CONTROLLER}


def test_routing_with_no_hosts_punts_everything():
    pol, paths = routing_recompute({}, "v1")
    assert paths == {} and pol == P.to_controller()


# ------------------------------------------------------------------------ lb

SERVERS = [{"id": f"srv{i}", "ip": f"10.0.1.{i}", "port": i + 1} for i in (1, 2, 3)]


def lb_state(counts):
    conns, n = {}, 0
    for sid, c in counts.items():
        for _ in range(c):
            n += 1
            conns[conn_key("10.0.0.1", n)] = {"client_ip": "10.0.0.1", "client_port": n, "server": sid}
    return LbState(conns)


def test_least_loaded_breaks_ties_on_lowest_id():
    state = lb_state({"srv1": 2, "srv2": 1, "srv3": 1})
    _, choice = lb_handle_connection(state, ("10.0.0.9", 1), {"servers": SERVERS}, "v2")
    assert choice == "srv2"


def test_cap_rejects_when_every_server_is_full():
    state = lb_state({"srv1": 1, "srv2": 1, "srv3": 1})
    new, choice = lb_handle_connection(state, ("10.0.0.9", 1), {"servers": SERVERS, "cap_c": 1}, "v2")
    assert choice is None
    assert new.conns[conn_key("10.0.0.9", 1)]["server"] is None


def test_existing_connection_keeps_its_server():
    state = lb_state({"srv3": 1})
    new, choice = lb_handle_connection(state, ("10.0.0.1", 1), {"servers": SERVERS}, "v2")
    assert choice == "srv3" and new is state


def test_no_servers():
    with pytest.raises(NoServers):
        lb_handle_connection(LbState(), ("10.0.0.1", 1), {"servers": []}, "v1")


def test_v1_random_is_seeded():
    import random
    picks = [lb_handle_connection(LbState(), ("c", i), {"servers": SERVERS}, "v1", random.Random(3))[1]
             for i in range(3)]
    again = [lb_handle_connection(LbState(), ("c", i), {"servers": SERVERS}, "v1", random.Random(3))[1]
             for i in range(3)]
    assert picks == again


@given(st.dictionaries(st.sampled_from(["srv1", "srv2", "srv3"]), st.integers(0, 4)),
       st.integers(1, 3), st.integers(1, 12))
@settings(max_examples=200, deadline=None)
def test_cap_holds_for_new_admissions_and_grandfathered_drain(initial, cap, arrivals):
    state = lb_state(initial)
    before = state.counts(SERVERS)
    for i in range(arrivals):
        state, choice = lb_handle_connection(state, ("10.0.0.9", i), {"servers": SERVERS, "cap_c": cap}, "v2")
        counts = state.counts(SERVERS)
        for sid, c in counts.items():
            assert c <= max(cap, before[sid])  # new admissions never exceed the cap
        if choice is not None:
            assert before[choice] < cap


def test_lb_policy_rewrites_known_connections():
    config = {"vip": "10.0.0.100", "servers": SERVERS, "client_port": 1}
    state = lb_state({"srv2": 1})
    t = P.compile_policy(lb_policy(state, config), "s1")
    (out,) = t.apply(Packet("s1", 1, "10.0.0.1", "10.0.0.100", 1, 80))
    assert (out.dst_ip, out.port) == ("10.0.1.2", 3)
    (punt,) = t.apply(Packet("s1", 1, "10.0.0.1", "10.0.0.100", 2, 80))
    assert punt.port == CONTROLLER
    (back,) = t.apply(Packet("s1", 3, "10.0.1.2", "10.0.0.1", 80, 1))
    assert back.port == 1


def test_registry_descriptors():
    assert len(REGISTRY) == 9
    assert descriptor("fw", "v3").namespaces[0] == ("fw_allowed", "ns_v1")
    assert descriptor("fw", "v1").policy_class == "filtering"
    assert descriptor("routing", "v2").subscriptions == ("ns:topology",)
    with pytest.raises(KeyError):
        descriptor("fw", "v9")
