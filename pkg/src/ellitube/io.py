"""CSV artifacts (the contract) and optional SVG plots of closed-loop logs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .harness import SimLog

FMT = "%.17g"


def log_columns(log: SimLog) -> list[str]:
    """Fixed column order: time, vectors in declaration order, scalars, per-row data."""
    n, m, p, q = log.x.shape[1], log.u.shape[1], log.y.shape[1], log.w.shape[1]
    d = log.margins.shape[1]
    cols = ["k"]
    for name, width in (("x", n), ("xhat", n), ("xbar", n), ("u", m), ("ubar", m), ("y", p), ("w", q), ("v", p)):
        cols += [f"{name}_{i}" for i in range(width)]
    cols += ["delta_sq", "value", "stage_cost", "containment"]
    for name in ("margin", "slack", "tube_excess"):
        cols += [f"{name}_{i}" for i in range(d)]
    cols.append("step_seconds")
    return cols


def log_table(log: SimLog) -> np.ndarray:
    T = log.x.shape[0]
    parts = [
        np.arange(T)[:, None],
        log.x, log.xhat, log.xbar, log.u, log.ubar, log.y,
        log.w[:T], log.v[:T],
        np.column_stack([log.delta_sq, log.value, log.stage_cost, log.containment]),
        log.margins, log.slack, log.tube_excess,
        log.solve_seconds[:, None],
    ]
    return np.hstack([np.asarray(a, float).reshape(T, -1) for a in parts])


def write_csv(path, header: list[str], table: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(table), fmt=FMT, delimiter=",", header=",".join(header), comments="")
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def write_log_csv(log: SimLog, path) -> Path:
    return write_csv(path, log_columns(log), log_table(log))


def write_schedule_csv(margins, path) -> Path:
    """One row per prediction step, one column per constraint row."""
    margins = np.asarray(margins, float)
    header = ["step"] + [f"row_{i}" for i in range(margins.shape[0])]
    return write_csv(path, header, np.column_stack([np.arange(margins.shape[1]), margins.T]))


def plot_log_svg(log: SimLog, path, state_rows=None, title: str | None = None) -> Path:
    """States, inputs and first-step margins against time; needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    idx = range(log.x.shape[1]) if state_rows is None else state_rows
    k = np.arange(log.x.shape[0])
    fig, axes = plt.subplots(3, 1, figsize=(6, 7), sharex=True)
    for i in idx:
        axes[0].plot(k, log.x[:, i], label=f"x[{i}]")
        axes[0].plot(k, log.xbar[:, i], "--", color=axes[0].lines[-1].get_color(), linewidth=0.8)
    axes[1].step(k, log.u, where="post")
    axes[2].plot(k, log.margins)
    axes[0].set_ylabel("state (dashed: nominal)")
    axes[1].set_ylabel("input")
    axes[2].set_ylabel("margin")
    axes[2].set_xlabel("k")
    axes[0].legend(fontsize="small")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
