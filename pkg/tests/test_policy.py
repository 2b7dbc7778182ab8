import random

import pytest
from hypothesis import given, settings, strategies as st

from nibswap import policy as P
from nibswap.errors import Unsupported

from policygen import DOMAIN, all_packets, mismatches, random_packet, random_policy

PKT = P.Packet("s1", 1, "10.0.0.1", "10.0.0.2", 3456, 80, "tcp")


def test_eval_basics():
    assert P.evaluate(P.Drop(), PKT) == frozenset()
    assert P.evaluate(P.Union(P.Id(), P.Id()), PKT) == {PKT}
    pol = P.Seq(P.Filter(P.Test("dst_ip", "10.0.0.2")), P.Modify("port", 2))
    assert P.evaluate(pol, PKT) == {PKT._replace(port=2)}
    assert P.evaluate(pol, PKT._replace(dst_ip="10.0.0.9")) == frozenset()


def test_compile_drop():
    t = P.compile_policy(P.Drop(), "s1")
    assert len(t.rules) == 1
    (r,) = t.rules
    assert (r.priority, r.match, r.actions) == (0, (), ())


def fw_pair_policy():
    out = P.match(src_ip="10.0.0.1", dst_ip="10.0.0.2", src_port=3456, dst_port=80)
    back = P.match(src_ip="10.0.0.2", dst_ip="10.0.0.1", src_port=80, dst_port=3456)
    return P.union_all([
        P.forward(out, 2),
        P.forward(back, 1),
        P.to_controller(P.Not(P.Or(out, back))),
    ])


def test_fw_allow_policy_compiles_to_three_rules():
    pol = fw_pair_policy()
    t = P.compile_policy(pol, "s1")
    assert len(t.rules) == 3
    assert [r.priority for r in t.rules] == [2, 1, 0]
    assert t.rules[-1].match == () and t.rules[-1].actions == ((("port", P.CONTROLLER),),)
    # exhaustive check over a two-value domain per field
    dom = {"switch": ["s1"], "port": [1, 2], "src_ip": ["10.0.0.1", "10.0.0.2"],
           "dst_ip": ["10.0.0.1", "10.0.0.2"], "src_port": [80, 3456], "dst_port": [80, 3456],
           "proto": ["tcp", "udp"]}
    packets = list(all_packets(dom))
    assert len(packets) == 2 ** 6
    assert mismatches(pol, packets) == []


def test_priorities_strictly_descending_and_total():
    rng = random.Random(3)
    for _ in range(50):
        t = P.compile_policy(random_policy(rng, 5), "s2")
        prios = [r.priority for r in t.rules]
        assert prios == sorted(prios, reverse=True) and len(set(prios)) == len(prios)
        assert t.rules[-1].match == ()


def test_union_matches_eval_on_random_packets():
    rng = random.Random(11)
    for _ in range(30):
        p, q = random_policy(rng, 4), random_policy(rng, 4)
        pkts = [random_packet(rng) for _ in range(200)]
        assert mismatches(P.Union(p, q), pkts) == []


def test_exhaustive_small_policies():
    rng = random.Random(5)
    packets = list(all_packets())
    for _ in range(15):
        assert mismatches(random_policy(rng, 4), packets) == []


def test_switch_modify_unsupported():
    with pytest.raises(Unsupported):
        P.compile_policy(P.Modify("switch", "s2"), "s1")


def test_switch_tests_resolved():
    pol = P.forward(P.Test("switch", "s1"), 3)
    assert P.compile_policy(pol, "s1").apply(PKT) == {PKT._replace(port=3)}
    assert P.compile_policy(pol, "s2").apply(PKT._replace(switch="s2")) == frozenset()


def test_owner_tags_reach_rules():
    pol = P.Union(P.Tag(("fw", "v1"), P.forward(P.Test("port", 1), 2)),
                  P.Tag(("lb", "v2"), P.forward(P.Test("port", 2), 1)))
    t = P.compile_policy(pol, "s1")
    assert t.owners() == {("fw", "v1"), ("lb", "v2")}
    assert P.compile_policy(P.Tag(("x", "1"), P.Id()), "s1").signature() == \
        P.compile_policy(P.Id(), "s1").signature()


def test_compose_app_policies():
    blocked = P.Packet("s1", 2, "10.0.0.9", "10.0.0.1", 80, 3456, "tcp")
    fw = P.Filter(P.Not(P.Test("src_ip", "10.0.0.9")))
    r = P.forward(P.PTrue(), 1)
    comp = P.compose_app_policies({"firewall": fw, "routing": r},
                                  {"firewall": "filtering", "routing": "forwarding"})
    assert comp == P.Seq(fw, r)
    assert P.evaluate(comp, blocked) == frozenset()
    assert P.evaluate(r, blocked)
    assert P.compose_app_policies({"routing": r}) == r
    r2 = P.forward(P.PTrue(), 2)
    assert P.compose_app_policies({"r1": r, "r2": r2}) == P.Union(r, r2)
    assert P.compose_app_policies({}) is None


def test_sexpr_round_trip():
    text = "(seq (filter (= dst_ip 10.0.0.2)) (mod port 2))"
    pol = P.from_sexpr(text)
    assert pol == P.Seq(P.Filter(P.Test("dst_ip", "10.0.0.2")), P.Modify("port", 2))
    assert P.to_sexpr(pol) == text
    rng = random.Random(9)
    for _ in range(100):
        p = random_policy(rng, 5)
        assert P.from_sexpr(P.to_sexpr(p)) == p
    tagged = P.Tag(("fw", "v1"), P.Modify("src_ip", "a b"))
    assert P.from_sexpr(P.to_sexpr(tagged)) == tagged


# ----------------------------------------------------------- algebraic laws

seeds = st.integers(0, 2**32)


def _same(p, q, rng, n=100):
    for _ in range(n):
        pkt = random_packet(rng)
        assert P.evaluate(p, pkt) == P.evaluate(q, pkt)


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_union_and_seq_laws(seed):
    rng = random.Random(seed)
    p, q, r = (random_policy(rng, 3) for _ in range(3))
    _same(P.Union(p, q), P.Union(q, p), rng)
    _same(P.Union(P.Union(p, q), r), P.Union(p, P.Union(q, r)), rng)
    _same(P.Seq(P.Seq(p, q), r), P.Seq(p, P.Seq(q, r)), rng)
    _same(P.Filter(P.PFalse()), P.Drop(), rng, 10)
    _same(P.Filter(P.PTrue()), P.Id(), rng, 10)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_table_agrees_with_eval(seed):
    rng = random.Random(seed)
    pol = random_policy(rng, 6)
    assert mismatches(pol, [random_packet(rng) for _ in range(200)]) == []
