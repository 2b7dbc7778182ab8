"""``morphctl``: boot a controller, deploy updates, inspect the NIB, run scenarios.

``start`` and ``deploy`` keep the system between invocations in a state
directory (``--state-dir``, default ``./.morphctl``): the topology, the app
versions and a dump of the NIB.  Each invocation rebuilds the system from
there, so apps restart from their stored state just as they would after a
controller restart.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import NibError, UpdateInProgress, ValidationError
from .runtime import MODES, Runtime
from .scenarios import SCENARIOS, run_scenario, scenario
from .simnet import build_topology
from .topos import SPECS
from .updc import UpdateSpec

SYSTEM_FILE = "system.json"
NIB_FILE = "nib.ndjson"

EXIT_OK, EXIT_ERROR, EXIT_ABORTED = 0, 1, 2


class CliError(Exception):
    pass


def parse_apps(text: str) -> list:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        app_id, sep, version = item.partition("@")
        if not sep or not app_id or not version:
            raise CliError(f"expected id@version, got {item!r}")
        out.append((app_id, version))
    if not out:
        raise CliError("no apps given")
    return out


def load_topology_spec(arg: str) -> dict:
    if arg in SPECS:
        return SPECS[arg]()
    path = Path(arg)
    if not path.exists():
        raise CliError(f"no topology file {arg!r} (built-ins: {', '.join(sorted(SPECS))})")
    return json.loads(path.read_text())


def _save(state_dir: Path, topo_spec, apps, app_config, rt: Runtime):
    state_dir.mkdir(parents=True, exist_ok=True)
    system = {"topology": topo_spec, "apps": [[a, v] for a, v in apps], "app_config": app_config}
    (state_dir / SYSTEM_FILE).write_text(json.dumps(system, indent=2, sort_keys=True) + "\n")
    rt.nib.dump(state_dir / NIB_FILE)


def _load(state_dir: Path):
    sys_path = state_dir / SYSTEM_FILE
    if not sys_path.exists():
        raise CliError(f"no system in {state_dir}; run `morphctl start` first")
    system = json.loads(sys_path.read_text())
    rt = Runtime(build_topology(system["topology"]), app_config=system.get("app_config") or {})
    nib_path = state_dir / NIB_FILE
    if nib_path.exists():
        rt.nib.restore(nib_path)
    return system, rt


def _boot(rt, apps, run_for=0.0):
    rt.boot(apps)
    if run_for > 0:
        rt.run_until(rt.sim.now + run_for)


def cmd_start(args) -> int:
    topo_spec = load_topology_spec(args.topo)
    apps = parse_apps(args.apps)
    app_config = json.loads(Path(args.config).read_text()) if args.config else {}
    rt = Runtime(build_topology(topo_spec), app_config=app_config)
    _boot(rt, apps, args.run)
    _save(Path(args.state_dir), topo_spec, apps, app_config, rt)
    for app_id, version in apps:
        print(f"started {app_id}@{version}")
    print(f"switches up: {', '.join(sorted(rt.sim.up))}")
    return EXIT_OK


def cmd_deploy(args) -> int:
    state_dir = Path(args.state_dir)
    system, rt = _load(state_dir)
    spec = UpdateSpec.from_json(args.spec)
    apps = [tuple(a) for a in system["apps"]]
    _boot(rt, apps)
    report = rt.deploy(spec)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    if not report.ok:
        print(report.error, file=sys.stderr)
        return EXIT_ABORTED
    versions = {u.app_id: u.to_version for u in spec.app_updates}
    apps = [(a, versions.get(a, v)) for a, v in apps]
    _save(state_dir, system["topology"], apps, system.get("app_config") or {}, rt)
    return EXIT_OK


def cmd_status(args) -> int:
    system, _ = _load(Path(args.state_dir))
    for app_id, version in system["apps"]:
        print(f"{app_id}@{version}")
    return EXIT_OK


def cmd_nib(args) -> int:
    _, rt = _load(Path(args.state_dir))
    nib = rt.nib
    if args.action == "dump":
        sys.stdout.write(nib.dumps())
    elif args.action == "versions":
        for ns, history in nib.namespaces().items():
            print(f"{ns}@{history[-1]}")
    else:
        if len(args.rest) != 2:
            raise CliError("usage: morphctl nib get <ns> <key>")
        ns, key = args.rest
        sess = nib.connect("morphctl", [(ns, nib.current_version(ns))])
        try:
            doc = nib.get(sess, ns, key)
        finally:
            nib.disconnect(sess)
        if doc is None:
            print(f"no document {ns}:{key}", file=sys.stderr)
            return EXIT_ERROR
        print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_scenario(args) -> int:
    kw = {} if args.duration is None else {"duration": args.duration}
    result = run_scenario(scenario(args.name, args.mode, args.seed, **kw))
    if args.out:
        Path(args.out).write_text(result.csv)
    else:
        sys.stdout.write(result.csv)
    out = sys.stderr if not args.out else sys.stdout
    for fid, f in sorted(result.flows.items()):
        reason = f" ({f.reset_reason})" if f.reset_reason else ""
        print(f"{fid}: {f.state}{reason}, inbound drops {f.rev_drops}", file=out)
    aborted = [r for r in result.reports if not r.ok]
    for r in aborted:
        print(f"update aborted: {r.error}", file=sys.stderr)
    return EXIT_ABORTED if aborted else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphctl", description=__doc__.splitlines()[0])
    p.add_argument("--state-dir", default=".morphctl", help="where start/deploy keep the system")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("start", help="boot a topology with a set of apps")
    s.add_argument("--topo", required=True, help=f"topology JSON file or one of {sorted(SPECS)}")
    s.add_argument("--apps", required=True, help="comma-separated id@version list")
    s.add_argument("--config", help="JSON file of per-app config blocks")
    s.add_argument("--run", type=float, default=0.0, help="simulated seconds to run after boot")
    s.set_defaults(func=cmd_start)

    d = sub.add_parser("deploy", help="run a coordinated update from a spec file")
    d.add_argument("spec")
    d.set_defaults(func=cmd_deploy)

    st = sub.add_parser("status", help="list the running app versions")
    st.set_defaults(func=cmd_status)

    n = sub.add_parser("nib", help="inspect the store")
    n.add_argument("action", choices=["dump", "get", "versions"])
    n.add_argument("rest", nargs="*")
    n.set_defaults(func=cmd_nib)

    sc = sub.add_parser("scenario", help="run one of the update experiments")
    sc.add_argument("name", choices=sorted(SCENARIOS))
    sc.add_argument("--mode", choices=MODES, default="state_transfer")
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--duration", type=float)
    sc.add_argument("--out", help="CSV path (stdout if omitted)")
    sc.set_defaults(func=cmd_scenario)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, NibError, ValidationError, UpdateInProgress, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"morphctl: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
