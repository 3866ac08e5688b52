#!/usr/bin/env python3
"""Run every bundled scenario through the command line pipeline.

Writes each scenario's trajectory CSV, invariants CSV, and summary into the
output directory and prints the summaries. Exits nonzero if any scenario
fails its configured tolerances.
"""

import argparse
import subprocess
import sys

from diracsim.cli import BUILTINS


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results", help="Output directory (default: results)")
    ap.add_argument(
        "--scenario",
        action="append",
        choices=sorted(BUILTINS),
        help="Run only this scenario (repeatable; default: all)",
    )
    args = ap.parse_args()

    names = args.scenario or sorted(BUILTINS)
    worst = 0
    for name in names:
        print(f"== {name} ==", flush=True)
        proc = subprocess.run(
            [sys.executable, "-m", "diracsim.cli", "run", name, "--out", args.out]
        )
        worst = max(worst, proc.returncode)
        print()
    return worst


if __name__ == "__main__":
    raise SystemExit(main())
