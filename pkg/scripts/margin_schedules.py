"""Margins computed at k = 0 over the prediction horizon for all three methods.

Writes one CSV per method and, if matplotlib is present, an SVG comparing the
x1, x2 and u rows.
"""

import argparse
from pathlib import Path

import numpy as np

from ellitube.harness import tightening_schedule, unique_rows
from ellitube.io import write_schedule_csv
from ellitube.scenario import load_scenario, with_overrides

ROOT = Path(__file__).resolve().parents[1]
METHODS = ("two-set", "single-set", "proposed")

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", nargs="?", default=ROOT / "scenarios" / "double_integrator.toml")
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--out", default="out")
    args = ap.parse_args()
    # start from the steady estimator shape, no initial-state check needed for offline margins
    config = with_overrides(load_scenario(args.scenario), initial__psi_scale=1.0, initial__x0=None, initial__xhat0=None)
    system = config.build_system()
    rows = unique_rows(config.build_constraints(system.n, system.m))
    out = Path(args.out)
    sched = {}
    for meth in METHODS:
        sched[meth] = tightening_schedule(config, meth, args.steps)
        write_schedule_csv(sched[meth], out / f"schedule_{meth}.csv")
    for meth in METHODS:
        print(f"{meth:<11}", " ".join(f"{v:7.4f}" for v in sched[meth][rows, -1]), "(last step)")
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise SystemExit(0)
    fig, axes = plt.subplots(1, len(rows), figsize=(4 * len(rows), 3))
    steps = np.arange(args.steps + 1)
    for ax, r in zip(axes, rows):
        for meth in METHODS:
            ax.step(steps, sched[meth][r], where="post", label=meth)
        ax.set_title(f"row {r}")
        ax.set_xlabel("prediction step")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(out / "schedules.svg")
    print(f"wrote {out}")
