"""Problem synthesis, closed-loop simulation and benchmark reports."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from .controller import CondensedOcp, ControllerState, Polytope, control_step, terminal_ingredients
from .ellipsoid import Ellipsoid, sample_boundary, sample_uniform
from .errors import InvalidArgumentError, InfeasibleTighteningError
from .estimator import EstimatorParams, ShapeSchedule, initial_state, measurement_update, steady_state_shape_riccati, tune_params
from .linsys import CostWeights, LinearSystem, MixedConstraints, dare_solve, policy_cost_matrix
from .scenario import ScenarioConfig, as_square
from .tube import (
    ProposedTighteningSource,
    TubeModel,
    TubeState,
    contraction_params,
    plan_switch,
    prediction_schedule,
    time_invariant_tightening,
)

log = logging.getLogger(__name__)

TABLE1_REFERENCE = {
    "two-set": (3.352, 4.500, 3.884),
    "single-set": (1.712, 2.294, 3.447),
    "proposed": (1.174, 1.443, 1.963),
}
TABLE1_TOLERANCE = {"two-set": 0.02, "single-set": 0.02, "proposed": 0.05}


@dataclass
class Problem:
    """Everything fixed offline for one scenario."""

    config: ScenarioConfig
    system: LinearSystem
    constraints: MixedConstraints
    W: Ellipsoid
    V: Ellipsoid
    K: np.ndarray
    weights: CostWeights
    est_params: EstimatorParams
    Psi: np.ndarray
    shapes: ShapeSchedule
    tube_model: TubeModel
    method: str
    terminal_bound: np.ndarray
    terminal_set: Polytope | None
    ocp: CondensedOcp | None
    plan: object = None
    baseline_model: bl.BaselineModel | None = None
    baseline_E0: bl.BoxSum | None = None
    synthesis_seconds: float = 0.0

    def new_source(self):
        if self.method == "proposed":
            return ProposedTighteningSource(self.tube_model, self.config.horizon, self.plan, self.config.tube.switch)
        return bl.BaselineTighteningSource(
            self.method, self.baseline_model, self.baseline_E0, self.config.horizon, self.config.baselines.tolerance
        )


def _gain(config: ScenarioConfig, system: LinearSystem, Qc, Rc):
    if config.gains.K is None:
        _, K = dare_solve(system.A, system.B, Qc, Rc)
        return K
    K = np.atleast_2d(np.asarray(config.gains.K, float))
    if K.shape != (system.m, system.n):
        raise InvalidArgumentError(f"K must be {system.m}x{system.n}")
    return K


_TUNED: dict[tuple, tuple[float, float]] = {}


def estimator_params(config: ScenarioConfig, system: LinearSystem, W: Ellipsoid, V: Ellipsoid) -> EstimatorParams:
    ec = config.estimator
    if ec.beta is None or ec.rho is None:
        # the grid search dominates synthesis time, so reuse it across methods and runs
        key = tuple(np.asarray(M, float).tobytes() for M in (system.A, system.C, system.D, W.matrix, V.matrix)) + (ec.grid_step,)
        if key not in _TUNED:
            res = tune_params(system, W.matrix, V.matrix, ec.grid_step)
            _TUNED[key] = (res.beta, res.rho)
        beta, rho = _TUNED[key]
        return EstimatorParams(beta, rho, W.matrix, V.matrix)
    return EstimatorParams(ec.beta, ec.rho, W.matrix, V.matrix)


def disturbance_sets(config: ScenarioConfig, system: LinearSystem):
    dc = config.disturbance
    W = Ellipsoid(as_square(dc.w_shape, system.q, "w_shape"), dc.w_radius)
    V = Ellipsoid(as_square(dc.v_shape, system.p, "v_shape"), dc.v_radius)
    return W, V


def baseline_model(config, system, constraints, W, V, K):
    if config.gains.L is None:
        raise InvalidArgumentError("baselines need an observer gain L")
    model = bl.BaselineModel(system, config.gains.L, K, bl.BoxSet.around(W), bl.BoxSet.around(V), constraints)
    return model, bl.observer_error_limit(model)


def check_initial_error(config: ScenarioConfig, system: LinearSystem, Psi) -> float:
    """Quadratic form of ``x0 - xhat0`` in ``Psi``; raises unless it is at most one."""
    init = config.initial
    if init.x0 is None or init.xhat0 is None:
        return 0.0
    x0, xhat0 = np.asarray(init.x0, float), np.asarray(init.xhat0, float)
    if x0.shape != (system.n,) or xhat0.shape != (system.n,):
        raise InvalidArgumentError(f"x0 and xhat0 must have length {system.n}")
    e = x0 - xhat0
    value = float(e @ np.linalg.solve(Psi, e))
    if value > 1.0 + 1e-12:
        raise InvalidArgumentError(f"initial error lies outside the initial ellipsoid: e^T Psi^-1 e = {value:.6g}")
    return value


_CACHE: dict[tuple[int, str, bool], tuple[ScenarioConfig, Problem]] = {}


def synthesize(config: ScenarioConfig, method: str | None = None, check_terminal: bool = True) -> Problem:
    """Offline design: gains, estimator shapes, tightening, terminal ingredients.

    Raises :class:`InfeasibleTighteningError` when the steady tightening
    leaves no room in some constraint.  Results are cached per config object.
    """
    method = method or config.method
    key = (id(config), method, check_terminal)
    hit = _CACHE.get(key)
    if hit is not None and hit[0] is config:
        return hit[1]
    t0 = time.perf_counter()
    system = config.build_system()
    constraints = config.build_constraints(system.n, system.m)
    W, V = disturbance_sets(config, system)
    Qc = as_square(config.cost.Q, system.n, "cost.Q")
    Rc = as_square(config.cost.R, system.m, "cost.R")
    K = _gain(config, system, Qc, Rc)
    # cost-to-go of the gain actually used, so the terminal decrease is exact
    weights = CostWeights(Qc, Rc, policy_cost_matrix(system.A, system.B, K, Qc, Rc))
    params = estimator_params(config, system, W, V)
    psi = config.initial.psi
    Psi = steady_state_shape_riccati(params, system) if isinstance(psi, str) and psi == "steady" else as_square(psi, system.n, "psi")
    Psi = config.initial.psi_scale * Psi
    check_initial_error(config, system, Psi)
    shapes = ShapeSchedule(params, system, Psi)
    model = TubeModel.build(system, K, W, constraints, shapes)
    problem = Problem(config, system, constraints, W, V, K, weights, params, Psi, shapes, model, method, None, None, None)
    if method == "proposed":
        plan = plan_switch(model, config.horizon, config.tube.alpha_cap, config.tube.steady_tol, min_horizon=config.steps)
        problem.plan = plan
        problem.terminal_bound = plan.terminal_bound
    else:
        bm, E0 = baseline_model(config, system, constraints, W, V, K)
        problem.baseline_model, problem.baseline_E0 = bm, E0
        problem.terminal_bound = problem.new_source().terminal_bound
    if check_terminal:
        _, Xf = terminal_ingredients(system, weights, K, constraints, problem.terminal_bound)
        problem.terminal_set = Xf
        problem.ocp = CondensedOcp(system, weights, constraints, Xf, config.horizon)
    problem.synthesis_seconds = time.perf_counter() - t0
    _CACHE[key] = (config, problem)
    return problem


# closed loop -----------------------------------------------------------------


@dataclass
class SimLog:
    seed: int
    method: str
    x: np.ndarray
    xhat: np.ndarray
    xbar: np.ndarray
    u: np.ndarray
    ubar: np.ndarray
    y: np.ndarray  # y_k = C x_k + v_k
    w: np.ndarray
    v: np.ndarray
    delta_sq: np.ndarray
    value: np.ndarray
    stage_cost: np.ndarray
    margins: np.ndarray  # first-step margins used at each k
    slack: np.ndarray
    tube_excess: np.ndarray  # realized deviation minus margin, should stay <= 0
    containment: np.ndarray  # estimator quadratic form minus (1 - delta^2)
    P_trace: list = field(repr=False, default_factory=list)
    solve_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))  # schedule + QP + estimator per step
    synthesis_seconds: float = 0.0
    status: str = "ok"
    aborted_at: int | None = None

    @property
    def steps(self) -> int:
        return self.x.shape[0]

    def lyapunov_excess(self) -> np.ndarray:
        """``V_{k+1} - V_k + q(xbar_k, ubar_k)``; Lyapunov decrease keeps it <= 0."""
        return self.value[1:] - self.value[:-1] + self.stage_cost[:-1]

    def invariant_violations(self, tol: float = 1e-9) -> dict:
        """Counts of steps breaking estimator containment, tube soundness or the constraints."""
        cont = self.containment[np.isfinite(self.containment)]
        return {
            "containment": int(np.sum(cont > tol)),
            "tube": int(np.sum(np.any(self.tube_excess > tol, axis=1))),
            "constraints": int(np.sum(np.any(self.slack < -tol, axis=1))),
        }


def _sampler(kind: str):
    if kind == "uniform":
        return lambda e, rng: sample_uniform(e, rng)
    if kind == "boundary":
        return lambda e, rng: sample_boundary(e, rng)
    return lambda e, rng: np.zeros(e.dim)


def run_closed_loop(config: ScenarioConfig, seed: int | None = None, problem: Problem | None = None, sampling: str | None = None) -> SimLog:
    """Simulate ``steps + 1`` controller updates with sampled disturbances.

    The proposed method pairs the set-membership estimator with the
    ellipsoidal tube; the baselines use a Luenberger observer with their
    polytopic margins.  The disturbance sequences depend only on the seed, so
    runs of different methods with the same seed see the same noise.
    """
    problem = problem or synthesize(config)
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    system, cons = problem.system, problem.constraints
    n, m, p, d = system.n, system.m, system.p, cons.d
    T = config.steps
    draw = _sampler(sampling or config.disturbance.sampling)
    w_seq = np.array([draw(problem.W, rng) for _ in range(T + 1)]).reshape(T + 1, system.q)
    v_seq = np.array([draw(problem.V, rng) for _ in range(T + 2)]).reshape(T + 2, p)

    x = np.asarray(config.initial.x0, float).copy()
    xhat0 = np.asarray(config.initial.xhat0, float)
    est = initial_state(xhat0, problem.Psi)
    ctrl = ControllerState.start(xhat0, problem.K, system)
    source = problem.new_source()
    proposed = problem.method == "proposed"
    L = None if proposed else problem.baseline_model.L

    rec = {k: [] for k in ("x", "xhat", "xbar", "u", "ubar", "y", "dsq", "V", "q", "marg", "slack", "tube", "cont", "P", "dt")}
    y = system.C @ x + v_seq[0]
    status, aborted = "ok", None
    for k in range(T + 1):
        t0 = time.perf_counter()
        sched = source.schedule(k, est.delta_sq)
        sol = problem.ocp.solve(ctrl.xbar, sched.margins)
        if not sol.optimal:
            status, aborted = "infeasible", k
            log.warning("OCP infeasible at k=%d (seed %d)", k, seed)
            break
        xbar_k = ctrl.xbar.copy()
        u = control_step(ctrl, est.xhat, sol)
        rec["dt"].append(time.perf_counter() - t0)
        ubar = sol.ubar_seq[0]
        realized = cons.F @ x + cons.G @ u - cons.F @ xbar_k - cons.G @ ubar
        e = x - est.xhat
        rec["x"].append(x.copy())
        rec["xhat"].append(est.xhat.copy())
        rec["xbar"].append(xbar_k)
        rec["u"].append(u)
        rec["y"].append(system.C @ x + v_seq[k])
        rec["ubar"].append(ubar.copy())
        rec["dsq"].append(est.delta_sq)
        rec["V"].append(sol.value)
        rec["q"].append(problem.weights.stage_cost(xbar_k, ubar))
        rec["marg"].append(sched.margins[:, 0].copy())
        rec["slack"].append(cons.slack(x, u))
        rec["tube"].append(realized - sched.margins[:, 0])
        rec["cont"].append(float(e @ np.linalg.solve(est.P, e)) - (1.0 - est.delta_sq) if proposed else np.nan)
        rec["P"].append(est.P)
        if k == T:
            break
        x_next = system.A @ x + system.B @ u + system.D @ w_seq[k]
        t0 = time.perf_counter()
        if proposed:
            source.advance(est.delta_sq)
            y_next = system.C @ x_next + v_seq[k + 1]
            est = measurement_update(est, u, y_next, problem.est_params, system, problem.shapes.step(k))
        else:
            # Luenberger predictor on y_k; error dynamics A + LC
            xh = system.A @ est.xhat + system.B @ u + L @ (system.C @ est.xhat - y)
            est = type(est)(xh, est.P, 0.0, k + 1)
            y = system.C @ x_next + v_seq[k + 1]
        rec["dt"][-1] += time.perf_counter() - t0
        x = x_next

    def arr(key, width):
        a = np.array(rec[key], dtype=float)
        return a.reshape(len(rec[key]), width) if width else a

    simlog = SimLog(
        seed=seed,
        method=problem.method,
        x=arr("x", n),
        xhat=arr("xhat", n),
        xbar=arr("xbar", n),
        u=arr("u", m),
        ubar=arr("ubar", m),
        y=arr("y", p),
        w=w_seq,
        v=v_seq,
        delta_sq=arr("dsq", 0),
        value=arr("V", 0),
        stage_cost=arr("q", 0),
        margins=arr("marg", d),
        slack=arr("slack", d),
        tube_excess=arr("tube", d),
        containment=arr("cont", 0),
        P_trace=rec["P"],
        solve_seconds=np.array(rec["dt"]),
        synthesis_seconds=problem.synthesis_seconds,
        status=status,
        aborted_at=aborted,
    )
    bad = {key: count for key, count in simlog.invariant_violations().items() if count}
    if bad:
        log.error("seed %d (%s): invariant violations %s", seed, problem.method, bad)
    return simlog


# reports -----------------------------------------------------------------------


def unique_rows(constraints: MixedConstraints) -> list[int]:
    """First row of each pair ``(F, G)`` / ``(-F, -G)``; symmetric sets give equal margins."""
    keep, seen = [], []
    rows = np.hstack([constraints.F, constraints.G])
    for i, r in enumerate(rows):
        if any(np.allclose(r, s) or np.allclose(r, -s) for s in seen):
            continue
        seen.append(r)
        keep.append(i)
    return keep


@dataclass
class Table1Report:
    values: dict
    reference: dict
    tolerance: dict
    feasible: dict
    seconds: float

    def relative_errors(self, method: str) -> np.ndarray:
        ref = np.asarray(self.reference[method])
        return np.abs(np.asarray(self.values[method]) - ref) / ref

    def passed(self, method: str) -> bool:
        return bool(np.all(self.relative_errors(method) <= self.tolerance[method]))

    def format(self) -> str:
        lines = [f"{'method':<12}{'computed':>36}{'reference':>30}  rel.err   pass  terminal set"]
        for meth in ("two-set", "single-set", "proposed"):
            vals = " ".join(f"{v:9.4f}" for v in self.values[meth])
            ref = " ".join(f"{v:8.3f}" for v in self.reference[meth])
            err = self.relative_errors(meth).max()
            feas = "ok" if self.feasible[meth] else "infeasible"
            lines.append(f"{meth:<12}{vals:>36}{ref:>30}  {err:7.2%}  {'yes' if self.passed(meth) else 'NO':>4}  {feas}")
        return "\n".join(lines)


def steady_tightenings(config: ScenarioConfig) -> dict:
    """Steady-state margins of all three methods, rows as in the config."""
    system = config.build_system()
    cons = config.build_constraints(system.n, system.m)
    W, V = disturbance_sets(config, system)
    Qc = as_square(config.cost.Q, system.n, "cost.Q")
    Rc = as_square(config.cost.R, system.m, "cost.R")
    K = _gain(config, system, Qc, Rc)
    params = estimator_params(config, system, W, V)
    P_inf = steady_state_shape_riccati(params, system)
    bm, E0 = baseline_model(config, system, cons, W, V, K)
    A_K = system.closed_loop(K)
    E_inf = Ellipsoid(P_inf)
    cp = contraction_params(A_K, W, E_inf, system.B @ K, config.tube.alpha_cap)
    return {
        "two-set": bl.steady_state_margins("two-set", bm, E0, config.baselines.tolerance),
        "single-set": bl.steady_state_margins("single-set", bm, E0, config.baselines.tolerance),
        "proposed": time_invariant_tightening(cp, W, E_inf, cons, K, A_K, system.B @ K),
        "constraints": cons,
        "system": system,
        "K": K,
        "estimator": params,
    }


def run_table1(config: ScenarioConfig) -> Table1Report:
    t0 = time.perf_counter()
    st = steady_tightenings(config)
    rows = unique_rows(st["constraints"])
    values = {k: tuple(float(v) for v in st[k][rows]) for k in TABLE1_REFERENCE}
    feasible = {}
    Qc = as_square(config.cost.Q, st["system"].n, "cost.Q")
    Rc = as_square(config.cost.R, st["system"].m, "cost.R")
    weights = CostWeights(Qc, Rc, policy_cost_matrix(st["system"].A, st["system"].B, st["K"], Qc, Rc))
    for meth in TABLE1_REFERENCE:
        try:
            terminal_ingredients(st["system"], weights, st["K"], st["constraints"], st[meth])
            feasible[meth] = True
        except InfeasibleTighteningError:
            feasible[meth] = False
    return Table1Report(values, TABLE1_REFERENCE, TABLE1_TOLERANCE, feasible, time.perf_counter() - t0)


def tightening_schedule(config: ScenarioConfig, method: str, steps: int) -> np.ndarray:
    """Margins at ``k = 0`` over ``steps`` prediction steps (rows x steps+1)."""
    if method == "proposed":
        problem = synthesize(config, "proposed", check_terminal=False)
        E0 = Ellipsoid(problem.shapes[0])
        return prediction_schedule(TubeState.start(E0), 0.0, steps, problem.tube_model).margins
    system = config.build_system()
    cons = config.build_constraints(system.n, system.m)
    W, V = disturbance_sets(config, system)
    K = _gain(config, system, as_square(config.cost.Q, system.n, "Q"), as_square(config.cost.R, system.m, "R"))
    bm, E0 = baseline_model(config, system, cons, W, V, K)
    fn = bl.two_set_tightening if method == "two-set" else bl.single_set_tightening
    return fn(steps, bm, E0)


@dataclass
class MonteCarloReport:
    runs: int
    seeds: list
    violations: int
    infeasible_runs: int
    lyapunov_violations: int
    min_slack: float
    max_tube_excess: float
    max_containment_excess: float
    max_final_nominal: float
    max_solve_seconds: float
    logs: list = field(repr=False, default_factory=list)

    def format(self) -> str:
        cont = f"{self.max_containment_excess:.3g}" if np.isfinite(self.max_containment_excess) else "n/a"
        return (
            f"runs={self.runs} violations={self.violations} infeasible={self.infeasible_runs} "
            f"lyapunov_violations={self.lyapunov_violations} min_slack={self.min_slack:.3g} "
            f"max_tube_excess={self.max_tube_excess:.3g} max_containment_excess={cont} "
            f"max_final_|xbar|={self.max_final_nominal:.3g} max_step_solve={1e3 * self.max_solve_seconds:.2f}ms"
        )


def _run_one(args):
    config, seed, method = args
    return run_closed_loop(config, seed, synthesize(config, method))


def run_monte_carlo(config: ScenarioConfig, n_runs: int | None = None, workers: int = 1, keep_logs: bool = True, method: str | None = None) -> MonteCarloReport:
    """Independent runs with seeds ``seed, seed + 1, ...``; aggregation is order independent."""
    n_runs = config.runs if n_runs is None else n_runs
    if n_runs < 1:
        raise InvalidArgumentError("n_runs must be >= 1")
    method = method or config.method
    seeds = [config.seed + i for i in range(n_runs)]
    jobs = [(config, s, method) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            logs = list(pool.map(_run_one, jobs))
    else:
        problem = synthesize(config, method)
        logs = [run_closed_loop(config, s, problem) for s in seeds]
    lyap_tol = 1e-6
    return MonteCarloReport(
        runs=n_runs,
        seeds=seeds,
        violations=int(sum(np.sum(lg.slack < -1e-9) for lg in logs)),
        infeasible_runs=sum(lg.status != "ok" for lg in logs),
        lyapunov_violations=int(sum(np.sum(lg.lyapunov_excess() > lyap_tol) for lg in logs)),
        min_slack=float(min(lg.slack.min() for lg in logs)),
        max_tube_excess=float(max(lg.tube_excess.max() for lg in logs)),
        max_containment_excess=float(max(np.nanmax(lg.containment, initial=-np.inf) for lg in logs)),
        max_final_nominal=float(max(np.linalg.norm(lg.xbar[-1]) for lg in logs)),
        max_solve_seconds=float(max(lg.solve_seconds.max() for lg in logs)),
        logs=logs if keep_logs else [],
    )
