"""Run the acceptance suite and write a JSON report.

Usage: python3 scripts/run_acceptance.py [--small] [--seed S] [--out report.json]
"""
import argparse
import sys

from dden import io
from dden.suite import SuiteConfig, report, run_acceptance


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--small", action="store_true", help="reduced scale for a quick run")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", default="acceptance_report.json")
    args = p.parse_args()
    cfg = SuiteConfig.small() if args.small else SuiteConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    results = run_acceptance(cfg)
    for r in results.values():
        print(r.line())
    rep = report(results, cfg)
    io.write_json(rep, args.out)
    print(f"report written to {args.out}")
    return 0 if rep["passed"] else 2


if __name__ == "__main__":
    sys.exit(main())
