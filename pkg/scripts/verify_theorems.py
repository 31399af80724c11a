"""Check every descent inequality on the shipped verification configs.

    python3 scripts/verify_theorems.py            # all of them
    python3 scripts/verify_theorems.py thm3       # one inequality

Prints one line per run and exits nonzero if any run violates its bound.
"""

import argparse
import sys
import time
from pathlib import Path

from tokenwalk.experiment import load_config, verify

ROOT = Path(__file__).resolve().parents[1] / "experiments"
SUITES = {
    "thm1": ["verify_thm1.json"],
    "thm2": ["verify_thm2.json", "verify_thm2_logistic.json"],
    "thm3": ["verify_thm3.json"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("theorems", nargs="*", metavar="THM", help="thm1, thm2 or thm3 (default: all)")
    ap.add_argument("--inner-tol", type=float, default=1e-10)
    ap.add_argument("--tol", type=float, default=1e-8)
    args = ap.parse_args()
    unknown = set(args.theorems) - set(SUITES)
    if unknown:
        ap.error(f"unknown theorem(s) {sorted(unknown)}; choose from {sorted(SUITES)}")

    failed = 0
    for thm in args.theorems or SUITES:
        for name in SUITES[thm]:
            t0 = time.perf_counter()
            runs = verify(thm, load_config(ROOT / name), args.inner_tol, args.tol)
            for r in runs:
                print(f"{thm} {name} seed={r.seed} {r.params}: {r.iterations} it, slack {r.min_slack:.2e}, "
                      f"{r.violations} violations, monotone={r.monotone}, "
                      f"token-mean err {r.max_consistency_error:.1e}")
            failed += sum(not r.passed for r in runs)
            print(f"{thm} {name}: {len(runs)} runs in {time.perf_counter() - t0:.1f}s")
    print("all bounds hold" if not failed else f"{failed} run(s) violated a bound")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
