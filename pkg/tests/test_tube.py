import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ellitube.ellipsoid import Ellipsoid, contained_in, image_ellipsoid, sample_boundary, sample_uniform, support
from ellitube.errors import InvalidArgumentError, SynthesisError
from ellitube.estimator import EstimatorParams, ShapeSchedule, initial_state, measurement_update
from ellitube.harness import synthesize
from ellitube.linsys import LinearSystem, MixedConstraints
from ellitube.scenario import with_overrides
from ellitube.tube import (
    ContractionParams,
    ProposedTighteningSource,
    TubeModel,
    TubeState,
    contraction_factor,
    contraction_holds,
    contraction_params,
    error_bound,
    plan_switch,
    prediction_schedule,
    time_invariant_tightening,
    tube_advance,
    worst_case_margins,
)

from conftest import DI_K

DI = LinearSystem([[1.0, 1.0], [0.0, 1.0]], [[1.0], [1.0]], [[1.0, 1.0]])
DI_CONS = MixedConstraints.from_boxes(2, 1, [(0, -50.0, 3.0), (1, -50.0, 3.0)], [(0, -3.0, 3.0)])


def di_model(lam=0.1, mu=0.05, beta=0.5, rho=0.2, Psi=None, constraints=DI_CONS, K=DI_K):
    params = EstimatorParams(beta, rho, lam**2 * np.eye(2), mu**2 * np.eye(1))
    if isinstance(Psi, str):  # "steady": start at the fixed point
        shapes = ShapeSchedule(params, DI, ShapeSchedule(params, DI, np.eye(2)).P_inf)
    else:
        shapes = ShapeSchedule(params, DI, np.eye(2) * 0.01 if Psi is None else Psi)
    return TubeModel.build(DI, K, Ellipsoid(np.eye(2), lam), constraints, shapes)


# error bounds ----------------------------------------------------------------


def test_error_bound_examples():
    P = [np.eye(2) * (j + 1) for j in range(5)]
    eb = error_bound(0, 0.4, P, 0.25)
    assert np.array_equal(eb.P, P[0]) and eb.radius_sq == pytest.approx(0.6)
    assert all(error_bound(i, 0.0, P, 0.25).radius_sq == 1.0 for i in range(5))
    assert error_bound(2, 0.8, P, 0.5 * 0.5).radius_sq == pytest.approx(0.95, abs=1e-15)
    assert np.array_equal(error_bound(1, 0.8, P, 0.25, k=2).P, P[3])
    with pytest.raises(InvalidArgumentError):
        error_bound(-1, 0.0, P, 0.25)


@given(st.floats(0, 1), st.floats(0.01, 0.99), st.integers(0, 30))
def test_error_bound_radius_monotone(delta_sq, decay, i):
    P = [np.eye(1)] * 40
    r0 = error_bound(i, delta_sq, P, decay).radius_sq
    r1 = error_bound(i + 1, delta_sq, P, decay).radius_sq
    assert 0.0 <= r0 <= r1 <= 1.0


# tube recursion ----------------------------------------------------------------


def test_tube_start_and_deadbeat():
    E0 = Ellipsoid(np.diag([2.0, 1.0]))
    t0 = TubeState.start(E0)
    c = np.array([[1.0, 0.0], [0.3, -0.7]])
    assert np.allclose(t0.support(c), support(E0, c))
    W = Ellipsoid(np.eye(2), 0.1)
    BK = np.array([[1.0, 2.0], [0.0, 1.0]])
    E = Ellipsoid(np.diag([0.5, 0.2]))
    t1 = tube_advance(t0, E, np.zeros((2, 2)), BK, W)
    assert np.allclose(t1.support(c), support(W, c) + support(E, c @ BK))
    assert t1.k == 1


def test_tube_scalar_geometric_series():
    W = Ellipsoid(np.eye(1))
    zero_error = Ellipsoid(np.eye(1), 0.0)
    tube = TubeState.start(zero_error)
    for k in range(1, 12):
        tube = tube_advance(tube, zero_error, [[0.5]], [[1.0]], W)
        assert tube.support([1.0]) == pytest.approx(2 * (1 - 0.5**k), rel=1e-14)
        assert len(tube.summands) == 1 + 2 * k


def test_tube_dimension_check():
    with pytest.raises(InvalidArgumentError):
        tube_advance(TubeState.start(Ellipsoid(np.eye(2))), Ellipsoid(np.eye(2)), np.eye(2), np.eye(2), Ellipsoid(np.eye(3)))


# schedules --------------------------------------------------------------------


def test_state_only_rows_reduce_to_tube_support():
    cons = MixedConstraints([[1.0, 0.0], [0.0, -1.0]], np.zeros((2, 1)), [1.0, 1.0])
    K0 = np.zeros((1, 2))
    model = TubeModel.build(LinearSystem([[0.5, 0.1], [0.0, 0.6]], [[1.0], [1.0]], [[1.0, 1.0]]), K0,
                            Ellipsoid(np.eye(2), 0.1), cons,
                            ShapeSchedule(EstimatorParams(0.5, 0.2, 0.01 * np.eye(2), 0.0025 * np.eye(1)),
                                          LinearSystem([[0.5, 0.1], [0.0, 0.6]], [[1.0], [1.0]], [[1.0, 1.0]]), np.eye(2)))
    tube = TubeState.start(Ellipsoid(np.eye(2)))
    sched = prediction_schedule(tube, 0.0, 6, model)
    # with K = 0 the estimation error never feeds the tube
    S = tube
    for i in range(7):
        assert np.allclose(sched.margins[:, i], S.support(cons.F))
        S = tube_advance(S, Ellipsoid(np.eye(2), 0.0), model.A_K, model.BK, model.W)


@given(st.floats(1e-4, 10.0), st.integers(0, 2**32 - 1))
def test_schedule_scales_with_disturbance_size(s, seed):
    """Scaling every disturbance and the initial set by s scales every margin by s."""
    base = di_model(Psi=0.01 * np.eye(2))
    scaled = di_model(lam=0.1 * s, mu=0.05 * s, Psi=0.01 * s**2 * np.eye(2))
    d = np.random.default_rng(seed).uniform(0, 1)
    m1 = prediction_schedule(TubeState.start(Ellipsoid(base.shapes[0])), d, 15, base).margins
    m2 = prediction_schedule(TubeState.start(Ellipsoid(scaled.shapes[0])), d, 15, scaled).margins
    assert np.allclose(m2, s * m1, rtol=1e-9, atol=0)
    assert np.all(m1 >= 0)


def test_tiny_disturbances_give_tiny_margins():
    model = di_model(lam=1e-12, mu=1e-12, Psi=1e-24 * np.eye(2))
    m = prediction_schedule(TubeState.start(Ellipsoid(model.shapes[0])), 0.0, 15, model).margins
    assert np.all(m < 1e-9)


def test_margins_grow_along_horizon_from_steady_start():
    model = di_model(Psi="steady")
    m = prediction_schedule(TubeState.start(Ellipsoid(model.shapes[0])), 0.0, 25, model).margins
    assert np.all(np.diff(m, axis=1) >= -1e-12)
    assert prediction_schedule(TubeState.start(Ellipsoid(model.shapes[0])), 0.0, 25, model).terminal_margin.shape == (6,)


def _error_rollouts(model, params, Psi, n_samples, N, rng, sampler):
    """Vectorized estimator errors e_i and control errors s_i with s_0 = e_0."""
    sys = DI
    e = sampler(Ellipsoid(Psi), rng, n_samples)
    s = e.copy()
    es, ss = [e], [s]
    W, V = Ellipsoid(params.Q), Ellipsoid(params.R)
    for i in range(N):
        _, P_next = model.shapes.step(i)
        G = params.rho * P_next @ sys.C.T @ np.linalg.inv(params.R)
        w = sampler(W, rng, n_samples)
        v = sampler(V, rng, n_samples)
        s = s @ model.A_K.T + w - e @ model.BK.T
        e = ((e @ sys.A.T + w) @ (np.eye(2) - G @ sys.C).T) - v @ G.T
        es.append(e)
        ss.append(s)
    return np.array(es), np.array(ss)


@pytest.mark.parametrize("sampler", [sample_uniform, sample_boundary])
def test_schedule_soundness_monte_carlo(sampler, rng):
    lam, mu, N = 0.1, 0.05, 15
    model = di_model(lam, mu, Psi=0.02 * np.eye(2))
    params = model.shapes.params
    m = prediction_schedule(TubeState.start(Ellipsoid(model.shapes[0])), 0.0, N, model).margins
    es, ss = _error_rollouts(model, params, model.shapes[0], 10**4, N, rng, sampler)
    realized = ss @ model.rows.T - es @ model.gk_rows.T  # (N+1, samples, d)
    assert np.all(realized.max(axis=1).T <= m + 1e-9)


@given(st.integers(0, 2**32 - 1))
def test_reanchored_schedules_are_nested(seed):
    """With measured delta^2, the schedule from k+1 never exceeds the one from k."""
    rng = np.random.default_rng(seed)
    model = di_model(Psi=0.02 * np.eye(2))
    params = model.shapes.params
    N = 10
    x = sample_uniform(Ellipsoid(model.shapes[0]), rng)
    est = initial_state(np.zeros(2), model.shapes[0])
    tube = TubeState.start(Ellipsoid(model.shapes[0]))
    prev = prediction_schedule(tube, est.delta_sq, N, model).margins
    for k in range(12):
        u = rng.uniform(-1, 1, 1)
        x = DI.A @ x + DI.B @ u + sample_boundary(Ellipsoid(params.Q), rng)
        E_now = error_bound(0, est.delta_sq, model.shapes, model.decay, k).ellipsoid()
        tube = tube_advance(tube, E_now, model.A_K, model.BK, model.W)
        est = measurement_update(est, u, DI.C @ x + sample_uniform(Ellipsoid(params.R), rng), params, DI, model.shapes.step(k))
        cur = prediction_schedule(tube, est.delta_sq, N, model).margins
        assert np.all(cur[:, :-1] <= prev[:, 1:] + 1e-9)
        prev = cur


# contraction and time-invariant tightening -----------------------------------


def test_contraction_nilpotent():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert contraction_factor(A, np.eye(2), 2) == 0.0
    cp = contraction_params(A, Ellipsoid(np.eye(2)), Ellipsoid(np.eye(2)), np.eye(2))
    assert cp.r1 == 2 and cp.alpha1 == 0.0


def test_contraction_scalar_powers():
    for r in range(1, 30):
        assert abs(contraction_factor([[0.5]], [[1.0]], r) - 0.5**r) <= 1e-12
    cp = contraction_params([[0.5]], Ellipsoid(np.eye(1)), Ellipsoid(np.eye(1)), [[1.0]], alpha_cap=0.05)
    assert (cp.r1, cp.alpha1) == (5, 0.03125)


def test_contraction_double_integrator_consistent():
    model = di_model(Psi="steady")
    E_inf = Ellipsoid(model.shapes.P_inf)
    cp = contraction_params(model.A_K, model.W, E_inf, model.BK)
    assert cp.alpha1 <= 0.05 and cp.alpha2 <= 0.05
    assert contraction_holds(cp, model.A_K, model.W)
    M = np.linalg.matrix_power(model.A_K, cp.r1)
    # containment of the explicit image, padded to stay full dimensional
    img = image_ellipsoid(M + 1e-12 * np.eye(2), model.W)
    assert contained_in(img, model.W.scaled(cp.alpha1 * (1 + 1e-8)))


def test_contraction_errors():
    with pytest.raises(SynthesisError):
        contraction_params([[0.99]], Ellipsoid(np.eye(1)), Ellipsoid(np.eye(1)), [[1.0]], alpha_cap=0.01, r_max=20)
    with pytest.raises(SynthesisError):
        contraction_params([[1.5]], Ellipsoid(np.eye(1)), Ellipsoid(np.eye(1)), [[1.0]])
    with pytest.raises(InvalidArgumentError):
        contraction_params([[0.5]], Ellipsoid(np.eye(1)), Ellipsoid(np.eye(1)), [[1.0]], alpha_cap=1.0)


def test_time_invariant_deadbeat_formula(rng):
    n = 2
    W = Ellipsoid(np.diag([0.04, 0.01]))
    E = Ellipsoid(np.array([[0.02, 0.005], [0.005, 0.01]]))
    B = np.array([[1.0], [0.5]])
    K = np.array([[0.3, -0.2]])
    BK = B @ K
    cons = MixedConstraints.from_boxes(n, 1, [(0, -1, 1), (1, -1, 1)], [(0, -1, 1)])
    from ellitube.tube import theta_bounding_shape

    cp = ContractionParams(1, 1, 0.0, 0.0, theta_bounding_shape(BK, E.matrix))
    got = time_invariant_tightening(cp, W, E, cons, K, np.zeros((n, n)), BK)
    rows = cons.closed_loop_rows(K)
    expected = support(W, rows) + support(E, rows @ BK) + support(E, cons.G @ K)
    assert np.allclose(got, expected, atol=1e-8)  # pad of the rank-one image is 1e-9


def test_time_invariant_zero_sets():
    cp = ContractionParams(3, 3, 0.1, 0.1, np.zeros((2, 2)))
    zero = Ellipsoid(np.eye(2), 0.0)
    got = time_invariant_tightening(cp, zero, zero, DI_CONS, DI_K, DI.closed_loop(DI_K), DI.B @ DI_K)
    assert np.array_equal(got, np.zeros(6))


def test_time_invariant_dominates_late_margins():
    model = di_model(Psi="steady")
    E_inf = Ellipsoid(model.shapes.P_inf)
    cp = contraction_params(model.A_K, model.W, E_inf, model.BK)
    ti = time_invariant_tightening(cp, model.W, E_inf, model.constraints, model.K, model.A_K, model.BK)
    m = worst_case_margins(model, 300)
    assert np.all(m[:, 100:] <= ti[:, None] + 1e-9)


def test_smaller_alpha_never_loosens():
    model = di_model(Psi="steady")
    E_inf = Ellipsoid(model.shapes.P_inf)
    prev = None
    for cap in (0.5, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01, 0.001):
        cp = contraction_params(model.A_K, model.W, E_inf, model.BK, cap)
        ti = time_invariant_tightening(cp, model.W, E_inf, model.constraints, model.K, model.A_K, model.BK)
        if prev is not None:
            assert np.all(ti <= prev + 1e-12)
        prev = ti


# switching ----------------------------------------------------------------------


def test_switch_plan_bounds_worst_case(di_config):
    cfg = with_overrides(di_config, initial__psi_scale=1.5)
    problem = synthesize(cfg, check_terminal=False)
    plan = problem.plan
    assert plan.index is not None and plan.gamma >= 1.0
    N = cfg.horizon
    m = plan.worst_case
    assert np.all(m[:, N - 1 :] <= plan.terminal_bound[:, None] + 1e-12)
    assert np.all(m[:, plan.index :] <= plan.steady_margins[:, None] + 1e-12)


def test_source_nested_and_frozen(di_config):
    problem = synthesize(di_config, "proposed", check_terminal=False)
    src = ProposedTighteningSource(problem.tube_model, 15, problem.plan)
    rng = np.random.default_rng(3)
    prev = None
    for k in range(problem.plan.index + 5):
        m = src.schedule(k, float(rng.uniform(0, 1))).margins
        if prev is not None:
            assert np.all(m[:, :-1] <= prev[:, 1:])
        if k >= problem.plan.index:
            assert np.allclose(m[:, -1], problem.plan.steady_margins)
        prev = m
        src.advance(float(rng.uniform(0, 1)))
    with pytest.raises(InvalidArgumentError):
        src.schedule(0, 0.0)


def test_plan_without_switch_falls_back(di_config):
    problem = synthesize(di_config, check_terminal=False)
    plan = plan_switch(problem.tube_model, 15, max_delay=0, rel_tol=1e-300)
    assert plan.index is None or plan.index == problem.tube_model.shapes.steady_index(1e-300)
