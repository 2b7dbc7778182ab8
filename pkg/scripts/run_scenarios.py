"""Runs every scenario under every update mode and writes one CSV per run.

    python3 scripts/run_scenarios.py --out results/ --seed 0
"""
import argparse
import logging
from pathlib import Path

from nibswap.runtime import MODES
from nibswap.scenarios import SCENARIOS, run_scenario, scenario


def summarize(res) -> str:
    lines = []
    for fid, f in sorted(res.flows.items()):
        zeros = sum(1 for t, v in enumerate(f.series) if v == 0 and t >= f.start + 1)
        lines.append(f"    {fid}: {f.state:<12} zero buckets after start={zeros:<3} "
                     f"servers={sorted(f.seen_by)} path={f.current_path}")
    for r in res.reports:
        lines.append(f"    update ok={r.ok} error={r.error}")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scenarios", nargs="*", default=sorted(SCENARIOS))
    ap.add_argument("--modes", nargs="*", default=list(MODES))
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    args.out.mkdir(parents=True, exist_ok=True)
    for name in args.scenarios:
        for mode in args.modes:
            res = run_scenario(scenario(name, mode, args.seed))
            path = args.out / f"{name}_{mode}.csv"
            path.write_text(res.csv)
            print(f"{name} / {mode} -> {path}")
            print(summarize(res))


if __name__ == "__main__":
    main()
