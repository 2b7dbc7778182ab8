"""Random packets and star-free policies for differential tests."""
import itertools
import random

from nibswap import policy as P

DOMAIN = {
    "switch": ["s1", "s2"],
    "port": [1, 2, 3],
    "src_ip": ["10.0.0.1", "10.0.0.2"],
    "dst_ip": ["10.0.0.1", "10.0.0.2"],
    "src_port": [80, 3456],
    "dst_port": [80, 3456],
    "proto": ["tcp", "udp"],
}


def all_packets(domain=DOMAIN):
    fields = P.FIELDS
    for values in itertools.product(*(domain[f] for f in fields)):
        yield P.Packet(*values)


def random_packet(rng, domain=DOMAIN):
    return P.Packet(*(rng.choice(domain[f]) for f in P.FIELDS))


def random_pred(rng, depth, domain=DOMAIN):
    if depth <= 1 or rng.random() < 0.3:
        r = rng.random()
        if r < 0.1:
            return P.PTrue()
        if r < 0.2:
            return P.PFalse()
        f = rng.choice(P.FIELDS)
        return P.Test(f, rng.choice(domain[f]))
    kind = rng.choice(["and", "or", "not"])
    if kind == "not":
        return P.Not(random_pred(rng, depth - 1, domain))
    cls = P.And if kind == "and" else P.Or
    return cls(random_pred(rng, depth - 1, domain), random_pred(rng, depth - 1, domain))


def random_policy(rng, depth, domain=DOMAIN):
    if depth <= 1 or rng.random() < 0.25:
        r = rng.random()
        if r < 0.1:
            return P.Id()
        if r < 0.2:
            return P.Drop()
        if r < 0.6:
            return P.Filter(random_pred(rng, 3, domain))
        f = rng.choice([f for f in P.FIELDS if f != "switch"])
        return P.Modify(f, rng.choice(domain[f]))
    cls = rng.choice([P.Union, P.Seq])
    return cls(random_policy(rng, depth - 1, domain), random_policy(rng, depth - 1, domain))


def table_eval(tables, pkt):
    out = tables[pkt.switch].apply(pkt)
    assert out is not None, "compiled tables are total"
    return out


def mismatches(pol, packets):
    tables = {sw: P.compile_policy(pol, sw) for sw in {p.switch for p in packets}}
    return [pkt for pkt in packets if table_eval(tables, pkt) != P.evaluate(pol, pkt)]
