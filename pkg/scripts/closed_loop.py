"""Closed-loop runs of the proposed controller and the single-set baseline on shared noise."""

import argparse
from pathlib import Path

import numpy as np

from ellitube.harness import run_closed_loop, synthesize
from ellitube.io import plot_log_svg, write_log_csv
from ellitube.scenario import load_scenario

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", nargs="?", default=ROOT / "scenarios" / "double_integrator.toml")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out")
    ap.add_argument("--svg", action="store_true")
    args = ap.parse_args()
    config = load_scenario(args.scenario)
    out = Path(args.out)
    for meth in ("proposed", "single-set"):
        log = run_closed_loop(config, args.seed, synthesize(config, meth))
        write_log_csv(log, out / f"closed_loop_{meth}.csv")
        if args.svg:
            plot_log_svg(log, out / f"closed_loop_{meth}.svg", title=meth)
        settle = np.flatnonzero(np.linalg.norm(log.x, axis=1) > 0.5)
        print(
            f"{meth:<11} status={log.status} max x[1]={log.x[:, 1].max():.3f} "
            f"u[0..3]={np.round(log.u[:4, 0], 3).tolist()} |x|>0.5 until k={settle.max() if settle.size else 0}"
        )
