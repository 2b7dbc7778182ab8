"""Wall-clock profile of the routing+topology update, phase by phase.

Repeats the update ``--runs`` times and prints the median time spent between
consecutive protocol marks, plus each phase's share of the whole deploy.
"""
import argparse
import statistics

from nibswap.scenarios import run_scenario, scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=20)
    args = ap.parse_args()
    spans, totals = {}, []
    for _ in range(args.runs):
        (report,) = run_scenario(scenario("routing", duration=21)).reports
        assert report.ok, report.error
        totals.append(report.total)
        for (_, a, _), (label, b, _) in zip(report.marks, report.marks[1:]):
            spans.setdefault(label, []).append(b - a)
    total = statistics.median(totals)
    print(f"{'until':<16}{'median ms':>10}{'share':>8}")
    for label, xs in spans.items():
        ms = statistics.median(xs)
        print(f"{label:<16}{ms * 1e3:>10.3f}{ms / total:>8.1%}")
    print(f"{'total':<16}{total * 1e3:>10.3f}")


if __name__ == "__main__":
    main()
