"""Quadrotor hover regulation: synthesis time, schedule time, per-step latency, attitude envelope."""

import argparse
import time
from pathlib import Path

import numpy as np

from ellitube.harness import run_monte_carlo, synthesize, tightening_schedule
from ellitube.scenario import load_scenario

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", nargs="?", default=ROOT / "scenarios" / "quadrotor.toml")
    ap.add_argument("--runs", type=int, default=None)
    args = ap.parse_args()
    config = load_scenario(args.scenario)
    problem = synthesize(config)
    print(f"synthesis {problem.synthesis_seconds:.2f}s, terminal set {problem.terminal_set.H.shape[0]} rows")
    t0 = time.perf_counter()
    tightening_schedule(config, "proposed", config.horizon)
    print(f"tightening schedule (N={config.horizon}) {1e3 * (time.perf_counter() - t0):.2f}ms")
    report = run_monte_carlo(config, args.runs)
    print(report.format())
    angles = max(np.abs(lg.x[:, 6:9]).max() for lg in report.logs)
    print(f"max |Euler angle| {angles:.4f} rad (limit {np.pi / 9:.4f})")
