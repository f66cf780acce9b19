#!/usr/bin/env python3
"""Fit forward models to synthetic pairs generated from known parameters.

    python3 scripts/run_recovery_bench.py                     # all shipped cases
    python3 scripts/run_recovery_bench.py cases/recovery_noisy.case --trace out/
"""

import argparse
import logging
from pathlib import Path

from hdcblur.bench import load_case, run_recovery_bench
from hdcblur.estimation import write_loss_trace

HERE = Path(__file__).resolve().parent


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("cases", nargs="*", type=Path,
                        help="case files (default: every scripts/cases/*.case)")
    parser.add_argument("--trace", type=Path, help="directory for per-case loss-trace CSVs")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    paths = args.cases or sorted((HERE / "cases").glob("*.case"))
    failed = 0
    for path in paths:
        case = load_case(path)
        report = run_recovery_bench(case)
        print(report.summary())
        if case.fit_q:
            print("   coeffs " + ", ".join(f"{c:+.6f}" for c in report.coeffs)
                  + "  (truth " + ", ".join(f"{c:+.6f}" for c in case.coeffs) + ")")
        if args.trace:
            args.trace.mkdir(parents=True, exist_ok=True)
            write_loss_trace(report.trace, args.trace / f"{case.name}_loss.csv")
        failed += not report.passed
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
