"""Steady-state tightening of the three methods at lambda = mu = 0.25."""

import argparse
from pathlib import Path

from ellitube.harness import run_table1
from ellitube.scenario import load_scenario

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", nargs="?", default=ROOT / "scenarios" / "table1.toml")
    args = ap.parse_args()
    report = run_table1(load_scenario(args.scenario))
    print(report.format())
    print(f"elapsed {report.seconds:.2f}s")
