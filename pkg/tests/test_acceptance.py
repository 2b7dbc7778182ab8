"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible even without ``-s``)
and then asserts, so a red criterion shows both in the summary and the log.
"""
import dataclasses
import json
import random
import statistics
from functools import lru_cache

import pytest

from nibswap import mu, xfgen
from nibswap import policy as P
from nibswap.clock import FixedClock
from nibswap.nib import Nib, TransformerRegistration
from nibswap.runtime import MODES, Runtime
from nibswap.scenarios import run_scenario, scenario
from nibswap.simnet import build_topology
from nibswap.topos import diamond_spec
from nibswap.updc import UpdateSpec

from conftest import EDGE_SOURCE, FW_DOC, FW_KEY, FW_SOURCE, PINNED_CLOCK
from policygen import mismatches, random_packet, random_policy


@pytest.fixture
def verdict(capsys):
    def report(n, title, problems):
        with capsys.disabled():
            status = "PASS" if not problems else "FAIL"
            detail = "" if not problems else "  <- " + "; ".join(problems[:3])
            print(f"\n{status} criterion {n}: {title}{detail}")
        assert not problems, problems
    return report


@lru_cache(maxsize=None)
def result(name, mode):
    return run_scenario(scenario(name, mode))


def zero_runs(series):
    best = cur = 0
    for v in series:
        cur = cur + 1 if v == 0 else 0
        best = max(best, cur)
    return best


# ---------------------------------------------------------------- 1: firewall

def test_criterion_1_firewall(verdict):
    problems = []
    st = result("firewall", "state_transfer")
    steady = st.steady("f1", before=st.update_times[0])
    if steady <= 0:
        problems.append("no pre-update traffic")
    low = [(t, v) for t, v in enumerate(st.series("f1")) if t >= st.update_times[0] and v < 0.9 * steady]
    if low:
        problems.append(f"state_transfer dipped below 90%: {low[:3]}")
    if st.flows["f1"].rev_drops:
        problems.append(f"state_transfer dropped {st.flows['f1'].rev_drops} inbound packets")
    if not all(r.ok for r in st.reports) or len(st.reports) != 2:
        problems.append("an update did not complete")

    sr = result("firewall", "simple_restart")
    steady = sr.steady("f1", before=sr.update_times[0])
    s = sr.series("f1")
    for u in sr.update_times:
        if not any(v < 0.5 * steady for v in s[int(u):int(u) + 5]):
            problems.append(f"simple_restart shows no dip after t={u}")
    if sr.flows["f1"].rev_drops < 1:
        problems.append("simple_restart dropped no inbound packets")
    verdict(1, "firewall keeps throughput and drops nothing under state transfer", problems)


# ----------------------------------------------------------------- 2: routing

def test_criterion_2_routing(verdict):
    problems = []
    st = result("routing", "state_transfer")
    u = int(st.update_times[0])
    a, b = st.flows["fA"], st.flows["fB"]
    pre = range(u - 5, u)
    if any(a.paths[t] != b.paths[t] for t in pre):
        problems.append("flows not on one path before the update")
    for f in (a, b):
        if any(abs(f.series[t] - 500_000) > 25_000 for t in pre):
            problems.append(f"{f.id} not at half rate before the update: {f.series[u - 5:u]}")
    end = len(a.series) - 1
    if set(a.paths[end].split("-")[1:-1]) & set(b.paths[end].split("-")[1:-1]):
        problems.append(f"paths not disjoint at the end: {a.paths[end]} / {b.paths[end]}")
    moved = [f for f in (a, b) if f.paths[end] != f.paths[u - 1]]
    unmoved = [f for f in (a, b) if f not in moved]
    if len(moved) != 1:
        problems.append(f"expected exactly one flow to move, got {[f.id for f in moved]}")
    for f in unmoved:
        zeros = sum(1 for v in f.series[u:] if v == 0)
        if zeros:
            problems.append(f"unmoved {f.id} has {zeros} zero buckets")
    for f in moved:
        zeros = sum(1 for v in f.series[u:] if v == 0)
        if zeros > 2:
            problems.append(f"moved {f.id} has {zeros} zero buckets")

    sr = result("routing", "simple_restart")
    for fid in ("fA", "fB"):
        run = zero_runs(sr.series(fid)[u:])
        if run < 5:
            problems.append(f"simple_restart {fid} longest zero run is {run}")
    verdict(2, "routing splits without disruption under state transfer", problems)


# --------------------------------------------------- 3: routes survive the update

def test_criterion_3_first_recompute_reproduces_routes(verdict):
    seen = []

    def prepare(rt):
        rt.platform.install_observers.append(lambda tables: seen.append((rt.sim.now, dict(tables))))

    r = run_scenario(scenario("routing", duration=21), prepare)
    before, after = {}, None
    for t, tables in seen:
        owners = set().union(*(tb.owners() for tb in tables.values()))
        if ("routing", "v2") in owners:
            after = tables
            break
        before.update(tables)
    problems = []
    if after is None:
        problems.append("routing v2 never installed a table")
    elif {sw: before[sw].signature() for sw in before} != {sw: after[sw].signature() for sw in after}:
        diff = sorted(sw for sw in after if before.get(sw, P.empty_table(sw)).signature() != after[sw].signature())
        problems.append(f"tables differ on {diff}")
    if not r.reports or not r.reports[0].ok:
        problems.append("update did not complete")
    verdict(3, "first recompute after the weight transformer yields identical tables", problems)


# ------------------------------------------------------------ 4: load balancer

def least_loaded_ok(res, flow):
    """Was ``flow`` sent to a server with the fewest live connections when it started?"""
    servers = {"srv1", "srv2"} | {h for f in res.flows.values() for h in f.seen_by}
    load = {s: 0 for s in servers}
    for other in res.flows.values():
        if other is not flow and other.start < flow.start and other.live:
            for h in other.seen_by:
                load[h] += 1
    fewest = min(load.values())
    return len(flow.seen_by) == 1 and load[next(iter(flow.seen_by))] == fewest, load


def test_criterion_4_loadbalancer(verdict):
    problems = []
    st = result("loadbalancer", "state_transfer")
    u = st.update_times[0]
    for f in st.flows.values():
        if f.start < u and (f.state != "established" or len(f.seen_by) != 1):
            problems.append(f"{f.id} ended {f.state} via {sorted(f.seen_by)}")
        if f.start > u:
            ok, load = least_loaded_ok(st, f)
            if not ok:
                problems.append(f"{f.id} went to {sorted(f.seen_by)} with loads {load}")
    if not any(f.start > u and "srv3" in f.seen_by for f in st.flows.values()):
        problems.append("no post-update connection reached the new server")
    for mode in ("record_replay", "simple_restart"):
        r = result("loadbalancer", mode)
        if not any(f.start < u and f.state == "reset" for f in r.flows.values()):
            problems.append(f"{mode}: no pre-update connection was reset")
    verdict(4, "load balancer keeps affinity under state transfer only", problems)


# -------------------------------------------------------------- 5: DSL goldens

def test_criterion_5_dsl_goldens(verdict):
    problems = []
    fw = xfgen.compile_source(FW_SOURCE)
    edge = xfgen.compile_source(EDGE_SOURCE)
    if [r[:3] for r in fw] != [("fw_allowed", "ns_v0", "ns_v1")]:
        problems.append(f"fw program compiled to {[r[:3] for r in fw]}")
    if [r[:3] for r in edge] != [("edge", "ns_v0", "ns_v1")]:
        problems.append(f"edge program compiled to {[r[:3] for r in edge]}")
    key, doc = xfgen.apply(fw[0][3], FW_KEY, FW_DOC, FixedClock(PINNED_CLOCK))
    expected = {"trusted_ip": "10.0.0.1", "trusted_port": 3456, "untrusted_ip": "10.0.0.2",
                "untrusted_port": 80, "last_count": 0, "time_created": 1426167581.566535}
    if key != FW_KEY or doc != expected or json.dumps(doc, sort_keys=True) != json.dumps(expected, sort_keys=True):
        problems.append(f"fw transform gave {key} {doc}")
    edge_doc = {"src": "s1", "dst": "s2", "src_port": 3, "dst_port": 1, "capacity": 1e6}
    _, out = xfgen.apply(edge[0][3], "s1_3_s2_1", edge_doc, FixedClock(PINNED_CLOCK))
    if out != dict(edge_doc, weight=1):
        problems.append(f"edge transform gave {out}")
    verdict(5, "both transformer programs parse and reproduce the printed documents", problems)


# ------------------------------------------------------ 6: lazy migration oracle

class Counting:
    def __init__(self, inner):
        self.inner, self.calls, self.source = inner, 0, inner.source

    def __call__(self, key, doc, clock):
        self.calls += 1
        return self.inner(key, doc, clock)


def random_fw_entries(rng, n=100):
    entries = {}
    while len(entries) < n:
        doc = {"trusted_ip": f"10.0.{rng.randrange(4)}.{rng.randrange(1, 255)}",
               "trusted_port": rng.randrange(1024, 65536),
               "untrusted_ip": f"10.1.{rng.randrange(4)}.{rng.randrange(1, 255)}",
               "untrusted_port": rng.choice([22, 80, 443, 8080])}
        key = f"{doc['trusted_ip']}_{doc['trusted_port']}_{doc['untrusted_ip']}_{doc['untrusted_port']}"
        entries[key] = doc
    return entries


def raw_versions(nib):
    rows = [json.loads(line) for line in nib.dumps().splitlines()]
    return {row["key"]: row["ver"] for row in rows if row.get("ns") == "fw_allowed" and "key" in row}


def test_criterion_6_lazy_migration_oracle(verdict):
    problems = []
    ((_, _, _, t),) = xfgen.compile_source(FW_SOURCE)
    clock = FixedClock(PINNED_CLOCK)
    for trial in range(25):
        rng = random.Random(trial)
        entries = random_fw_entries(rng)
        oracle = {k: xfgen.apply(t, k, d, clock) for k, d in entries.items()}
        nib = Nib(clock)
        s0 = nib.connect("fw", [("fw_allowed", "ns_v0")])
        for k, d in entries.items():
            nib.put(s0, "fw_allowed", k, d)
        nib.disconnect(s0)
        counting = Counting(t)
        nib.register_transformer(TransformerRegistration("fw_allowed", "ns_v0", "ns_v1", counting))
        s1 = nib.connect("fw", [("fw_allowed", "ns_v1")])
        keys = list(entries)
        accessed = rng.sample(keys, rng.randrange(0, len(keys) + 1))
        for k in accessed + rng.sample(accessed, len(accessed) // 2):  # repeats must not re-run
            got = nib.get(s1, "fw_allowed", k)
            if got != oracle[k][1]:
                problems.append(f"trial {trial}: {k} read as {got}")
        if counting.calls != len(accessed):
            problems.append(f"trial {trial}: {counting.calls} invocations for {len(accessed)} keys")
        versions = raw_versions(nib)
        stale = {k for k, v in versions.items() if v == "ns_v0"}
        if stale != set(keys) - set(accessed):
            problems.append(f"trial {trial}: raw dump has {len(stale)} ns_v0 entries, "
                            f"expected {len(keys) - len(accessed)}")
        rest = [k for k in keys if k not in accessed]
        rng.shuffle(rest)
        for k in rest:
            nib.get(s1, "fw_allowed", k)
        final = {e.key: e.doc for e in nib.entries() if e.namespace == "fw_allowed"}
        if final != {k: d for k, (_, d) in oracle.items()}:
            problems.append(f"trial {trial}: final store differs from the eager oracle")
        if set(raw_versions(nib).values()) != {"ns_v1"}:
            problems.append(f"trial {trial}: entries left behind after full access")
    verdict(6, "lazy migration matches the eager oracle and runs once per accessed key", problems)


# ------------------------------------------------------- 7: protocol atomicity

FW_ON_S4 = {"fw": {"switch": "s4", "trusted_port": 1, "untrusted_port": 2}}
UPDATES = (("fw", "v2", "v3"), ("topology", "v1", "v2"), ("routing", "v1", "v2"))


@lru_cache(maxsize=None)
def learned_topology():
    r = run_scenario(scenario("routing", duration=8))
    return tuple((e.key, e.doc) for e in r.runtime.nib.entries() if e.namespace == "topology")


def booted(seed):
    rt = Runtime(build_topology(diamond_spec()), sched_seed=seed, app_config=FW_ON_S4)
    admin = rt.nib.connect("admin", [("topology", "ns_v0")])
    for k, d in learned_topology():
        rt.nib.put(admin, "topology", k, d)
    rt.nib.disconnect(admin)
    rt.boot([("fw", "v2"), ("topology", "v1"), ("routing", "v1")])
    return rt


def mixed(tables):
    """Old rules of one updating app next to new rules of another, on any one switch."""
    old = {(a, f) for a, f, _ in UPDATES}
    new = {(a, t) for a, _, t in UPDATES}
    for sw, table in tables.items():
        owners = table.owners()
        olds = {a for a, v in owners if (a, v) in old}
        news = {a for a, v in owners if (a, v) in new}
        if any(x != y for x in olds for y in news):
            return sw, sorted(owners)
    return None


def frozen(rt):
    return rt.nib.dumps(), json.dumps({sw: t.to_json() for sw, t in sorted(rt.sim.tables.items())})


def test_criterion_7_atomicity(verdict):
    problems, traces = [], set()
    spec = UpdateSpec.of(UPDATES, [mu.source("fw_timeout"), mu.source("topology_weight")])
    runs = 1000
    for seed in range(runs):
        rt = booted(seed)
        trace = []

        def check(*_):
            bad = mixed(rt.sim.tables)
            if bad:
                problems.append(f"seed {seed}: {bad}")

        def step(task):
            trace.append(task.name)
            check()

        rt.sched.observers.append(step)
        rt.platform.install_observers.append(check)
        report = rt.deploy(spec)
        traces.add(tuple(trace))
        if not report.ok:
            problems.append(f"seed {seed}: {report.error}")
        owners = set().union(*(t.owners() for t in rt.sim.tables.values()))
        if owners != {("fw", "v3"), ("routing", "v2")}:
            problems.append(f"seed {seed}: final owners {sorted(owners)}")
    if len(traces) < runs // 10:
        problems.append(f"only {len(traces)} distinct interleavings")

    bad_chain = mu.source("fw_timeout").replace("ns_v0->ns_v1", "ns_v1->ns_v2")
    wrong = UpdateSpec.of(UPDATES, [bad_chain, mu.source("topology_weight")])
    for seed in range(100):
        rt = booted(seed)
        before = frozen(rt)
        report = rt.deploy(wrong)
        if report.ok or not report.error.startswith("ChainMismatch"):
            problems.append(f"seed {seed}: bad chain gave {report.error}")
        if frozen(rt) != before:
            problems.append(f"seed {seed}: abort changed the store or the tables")
    verdict(7, f"no mixed-version tables over {runs} interleavings ({len(traces)} distinct); "
               "aborts restore state exactly", problems)


# ------------------------------------------------ 8: compiler equivalence

def literals(node, out):
    if isinstance(node, (P.Test, P.Modify)):
        out.setdefault(node.field, set()).add(node.value)
    elif dataclasses.is_dataclass(node):
        for f in dataclasses.fields(node):
            literals(getattr(node, f.name), out)
    return out


FILLER = {"switch": "s9", "port": 99, "src_ip": "192.0.2.1", "dst_ip": "192.0.2.2",
          "src_port": 7, "dst_port": 9, "proto": "udp"}


def domain_for(pol, switches):
    lits = literals(pol, {})
    dom = {f: sorted(lits.get(f, set()) | {FILLER[f]}, key=str) for f in P.FIELDS}
    dom["switch"] = sorted(set(switches))
    dom["proto"] = sorted(set(dom["proto"]) | {"tcp"})
    return dom


def test_criterion_8_compiler_equivalence(verdict):
    problems = []
    rng = random.Random(8)
    emitted = []
    for name in ("firewall", "routing", "loadbalancer"):
        for mode in MODES:
            r = result(name, mode)
            switches = r.config.topology["switches"]
            emitted += [(p, switches) for p in r.policies]
    if len(emitted) < 9:
        problems.append(f"only {len(emitted)} policies logged")
    for i, (pol, switches) in enumerate(emitted):
        dom = domain_for(pol, switches)
        packets = [random_packet(rng, dom) for _ in range(1000)]
        bad = mismatches(pol, packets)
        if bad:
            problems.append(f"logged policy {i}: {len(bad)} mismatches, e.g. {bad[0]}")
    for i in range(1000):
        pol = random_policy(rng, 6)
        packets = [random_packet(rng) for _ in range(1000)]
        bad = mismatches(pol, packets)
        if bad:
            problems.append(f"random policy {i}: {len(bad)} mismatches, e.g. {bad[0]}")
    verdict(8, f"tables agree with the algebra on {len(emitted)} logged and 1000 random policies",
            problems)


# ---------------------------------------------------------- 9: timing shape

def test_criterion_9_quiescence_is_cheap(verdict):
    problems, shares = [], []
    for _ in range(5):
        r = run_scenario(scenario("routing", duration=21))
        (report,) = r.reports
        if not report.ok:
            problems.append(report.error)
            continue
        total = report.total
        shares.append((report.at("quiesced") / total, (total - report.at("installed")) / total))
    quiesce = statistics.median(s[0] for s in shares)
    restart = statistics.median(s[1] for s in shares)
    if quiesce >= 0.1:
        problems.append(f"quiesce+pause took {quiesce:.1%} of the deploy")
    if restart <= 0.5:
        problems.append(f"restart and recompute took only {restart:.1%}")
    verdict(9, f"quiesce+pause {quiesce:.1%} of deploy time, restart+recompute {restart:.1%}",
            problems)
