"""The three scenario topologies as JSON-able specs."""
from __future__ import annotations

MBPS = 1e6


def firewall_spec() -> dict:
    """One switch; trusted host on port 1, untrusted host on port 2; 1 Mbps edges."""
    return {
        "switches": ["s1"],
        "hosts": [
            {"id": "h1", "ip": "10.0.0.1", "switch": "s1", "port": 1, "capacity_bps": MBPS},
            {"id": "h2", "ip": "10.0.0.2", "switch": "s1", "port": 2, "capacity_bps": MBPS},
        ],
        "links": [],
    }


def diamond_spec(host_bps: float = 10 * MBPS, core_bps: float = MBPS) -> dict:
    """s1 fans out to s2 and s3, which both reach s4; hA, hB on s1 and the server hS on s4."""
    return {
        "switches": ["s1", "s2", "s3", "s4"],
        "hosts": [
            {"id": "hA", "ip": "10.0.0.1", "switch": "s1", "port": 1, "capacity_bps": host_bps},
            {"id": "hB", "ip": "10.0.0.2", "switch": "s1", "port": 2, "capacity_bps": host_bps},
            {"id": "hS", "ip": "10.0.0.3", "switch": "s4", "port": 1, "capacity_bps": host_bps},
        ],
        "links": [
            {"a": ["s1", 3], "b": ["s2", 1], "capacity_bps": core_bps},
            {"a": ["s1", 4], "b": ["s3", 1], "capacity_bps": core_bps},
            {"a": ["s2", 2], "b": ["s4", 2], "capacity_bps": core_bps},
            {"a": ["s3", 2], "b": ["s4", 3], "capacity_bps": core_bps},
        ],
    }


def lb_server(i: int) -> dict:
    return {"id": f"srv{i}", "ip": f"10.0.1.{i}", "switch": "s1", "port": i + 1,
            "capacity_bps": MBPS}


def lb_spec(n_servers: int = 2) -> dict:
    """One switch; the client side on port 1 and servers srv1..srvN on ports 2..N+1."""
    return {
        "switches": ["s1"],
        "hosts": [{"id": "client", "ip": "10.0.0.1", "switch": "s1", "port": 1,
                   "capacity_bps": 10 * MBPS}]
        + [lb_server(i) for i in range(1, n_servers + 1)],
        "links": [],
    }


SPECS = {"firewall": firewall_spec, "routing": diamond_spec, "diamond": diamond_spec,
         "loadbalancer": lb_spec}
