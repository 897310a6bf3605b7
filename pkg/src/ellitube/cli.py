"""Command line entry point: ``ellitube {run,table1,montecarlo,tighten,tune} scenario.toml``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, io
from .errors import EllitubeError
from .estimator import tune_params
from .scenario import METHODS, load_scenario, with_overrides


def _run(args) -> int:
    config = load_scenario(args.scenario)
    if args.method:
        config = with_overrides(config, method=args.method)
    problem = harness.synthesize(config)
    log = harness.run_closed_loop(config, args.seed, problem)
    out = Path(args.out)
    stem = f"{config.name}_{config.method}_seed{log.seed}"
    io.write_log_csv(log, out / f"{stem}.csv")
    if args.svg:
        io.plot_log_svg(log, out / f"{stem}.svg", title=stem)
    bad = log.invariant_violations()
    print(
        f"{stem}: status={log.status} min_slack={log.slack.min():.4g} "
        f"final_|xbar|={np.linalg.norm(log.xbar[-1]):.3g} max_step={1e3 * log.solve_seconds.max():.2f}ms "
        f"violations={bad}"
    )
    print(f"wrote {out / (stem + '.csv')}")
    return 0 if log.status == "ok" and not any(bad.values()) else 1


def _table1(args) -> int:
    report = harness.run_table1(load_scenario(args.scenario))
    print(report.format())
    print(f"elapsed {report.seconds:.2f}s")
    return 0 if all(report.passed(m) for m in harness.TABLE1_REFERENCE) else 1


def _montecarlo(args) -> int:
    config = load_scenario(args.scenario)
    report = harness.run_monte_carlo(config, args.runs, workers=args.workers, keep_logs=False, method=args.method)
    print(report.format())
    return 0 if report.violations == 0 and report.infeasible_runs == 0 else 1


def _tighten(args) -> int:
    config = load_scenario(args.scenario)
    margins = harness.tightening_schedule(config, args.method, args.steps)
    if args.out:
        print(f"wrote {io.write_schedule_csv(margins, args.out)}")
    else:
        header = ["step"] + [f"row_{i}" for i in range(margins.shape[0])]
        print(",".join(header))
        for i, col in enumerate(margins.T):
            print(",".join([str(i)] + [io.FMT % v for v in col]))
    return 0


def _tune(args) -> int:
    config = load_scenario(args.scenario)
    system = config.build_system()
    W, V = harness.disturbance_sets(config, system)
    step = args.grid_step or config.estimator.grid_step
    res = tune_params(system, W.matrix, V.matrix, step)
    print(f"grid step {step}: {res.evaluated} points evaluated")
    print(f"beta={res.beta:.4f} rho={res.rho:.4f} trace(P_inf)={res.trace:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ellitube", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one closed-loop simulation, CSV log out")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--svg", action="store_true", help="also render an SVG plot (needs matplotlib)")
    p.set_defaults(func=_run)

    p = sub.add_parser("table1", help="steady-state tightening of all methods against the reference table")
    p.add_argument("scenario")
    p.set_defaults(func=_table1)

    p = sub.add_parser("montecarlo", help="seeded batch of closed-loop runs")
    p.add_argument("scenario")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--method", choices=METHODS, default=None)
    p.set_defaults(func=_montecarlo)

    p = sub.add_parser("tighten", help="margin schedule at k = 0 as CSV")
    p.add_argument("scenario")
    p.add_argument("--method", choices=METHODS, default="proposed")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_tighten)

    p = sub.add_parser("tune", help="grid search for the estimator parameters")
    p.add_argument("scenario")
    p.add_argument("--grid-step", type=float, default=None)
    p.set_defaults(func=_tune)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (EllitubeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
