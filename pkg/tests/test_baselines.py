import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import DI_K, DI_L
from ellitube.baselines import (
    BaselineModel,
    BaselineTighteningSource,
    BoxSet,
    BoxSum,
    observer_error_limit,
    single_set_tightening,
    steady_state_margins,
    two_set_tightening,
)
from ellitube.ellipsoid import Ellipsoid, sample_uniform
from ellitube.errors import DivergenceError, InvalidArgumentError, SynthesisError
from ellitube.linsys import LinearSystem, MixedConstraints

DI = LinearSystem([[1.0, 1.0], [0.0, 1.0]], [[1.0], [1.0]], [[1.0, 1.0]])
DI_CONS = MixedConstraints.from_boxes(2, 1, [(0, -50.0, 3.0), (1, -50.0, 3.0)], [(0, -3.0, 3.0)])


def di_model(lam=0.1, mu=0.05):
    return BaselineModel(DI, DI_L, DI_K, BoxSet.around(Ellipsoid(np.eye(2), lam)), BoxSet.around(Ellipsoid(np.eye(1), mu)), DI_CONS)


def test_box_support_and_soundness(rng):
    e = Ellipsoid(np.array([[2.0, 0.7], [0.7, 1.0]]), 0.3)
    box = BoxSet.around(e)
    c = rng.standard_normal((50, 2))
    assert np.allclose(box.support(c), np.abs(c) @ box.half_widths)
    pts = sample_uniform(e, rng, 10**4)
    assert np.all(np.abs(pts) <= box.half_widths + 1e-15)
    with pytest.raises(InvalidArgumentError):
        BoxSet([-1.0, 1.0])


def test_box_sum_algebra():
    s = BoxSum(np.diag([1.0, 2.0])) + BoxSum(np.ones((2, 1)))
    assert s.support([1.0, 0.0]) == pytest.approx(2.0)
    img = s.image(np.array([[0.0, 0.0], [0.0, 1.0]]))
    assert img.G.shape[1] == 2  # zero column dropped
    assert BoxSum.zero(3).support(np.ones(3)) == 0.0


def test_two_set_initial_margin():
    model = di_model()
    E0 = observer_error_limit(model)
    m = two_set_tightening(0, model, E0)
    assert np.allclose(m[:, 0], E0.support(DI_CONS.F))


def test_baselines_agree_at_start():
    model = di_model()
    E0 = observer_error_limit(model)
    assert np.array_equal(two_set_tightening(0, model, E0)[:, 0], single_set_tightening(0, model, E0)[:, 0])


def test_zero_boxes_give_zero():
    model = BaselineModel(DI, DI_L, DI_K, BoxSet([0.0, 0.0]), BoxSet([0.0]), DI_CONS)
    E0 = observer_error_limit(model)
    assert np.all(two_set_tightening(10, model, E0) == 0)
    assert np.all(single_set_tightening(10, model, E0) == 0)
    assert np.all(steady_state_margins("two-set", model, E0) == 0)


def test_scalar_steady_state():
    # a + lc = 0.5 with l = 0 so the prediction error stays zero
    s = LinearSystem([[0.5]], [[1.0]], [[1.0]])
    cons = MixedConstraints([[1.0]], [[0.0]], [10.0])
    model = BaselineModel(s, [[0.0]], [[0.0]], BoxSet([1.0]), BoxSet([0.0]), cons)
    E0 = observer_error_limit(model)
    assert E0.support([1.0]) == pytest.approx(2.0, abs=1e-12)
    for kind in ("two-set", "single-set"):
        assert steady_state_margins(kind, model, E0)[0] == pytest.approx(2.0, abs=1e-9)


@pytest.mark.parametrize("lam, mu", [(0.1, 0.05), (0.25, 0.25)])
def test_single_set_below_two_set(lam, mu):
    model = di_model(lam, mu)
    E0 = observer_error_limit(model)
    assert np.all(single_set_tightening(40, model, E0) <= two_set_tightening(40, model, E0) + 1e-9)


def test_two_set_monotone_and_geometric():
    model = di_model(0.25, 0.25)
    E0 = observer_error_limit(model)
    m = two_set_tightening(60, model, E0)
    assert np.all(np.diff(m, axis=1) >= -1e-12)
    limit = steady_state_margins("two-set", model, E0)
    rate = max(np.abs(np.linalg.eigvals(M)).max() for M in (model.A_L, model.A_K))
    gap = np.abs(m - limit[:, None]).max(axis=0)
    k = np.arange(m.shape[1])
    assert np.all(gap[5:] <= 50 * np.maximum(rate, 0.5) ** k[5:] + 1e-9)


def test_single_set_converges():
    model = di_model(0.25, 0.25)
    E0 = observer_error_limit(model)
    m = single_set_tightening(200, model, E0)
    limit = steady_state_margins("single-set", model, E0)
    assert np.allclose(m[:, -1], limit, atol=1e-9)


def test_unstable_and_bad_kind():
    model = BaselineModel(DI, [[0.0], [0.0]], DI_K, BoxSet([0.1, 0.1]), BoxSet([0.1]), DI_CONS)
    with pytest.raises(SynthesisError):
        observer_error_limit(model)
    good = di_model()
    with pytest.raises(InvalidArgumentError):
        steady_state_margins("three-set", good, observer_error_limit(good))
    with pytest.raises(InvalidArgumentError):
        steady_state_margins("two-set", good, observer_error_limit(good), tolerance=0.0)


def test_no_convergence_reported():
    s = LinearSystem([[0.999]], [[1.0]], [[1.0]])
    cons = MixedConstraints([[1.0]], [[0.0]], [10.0])
    model = BaselineModel(s, [[0.0]], [[0.0]], BoxSet([1.0]), BoxSet([0.0]), cons)
    with pytest.raises(DivergenceError):
        steady_state_margins("two-set", model, BoxSum.zero(1), tolerance=1e-12, max_steps=50)


def test_source_schedule_matches_table():
    model = di_model()
    E0 = observer_error_limit(model)
    src = BaselineTighteningSource("single-set", model, E0, 15)
    table = single_set_tightening(60, model, E0)
    assert np.allclose(src.schedule(7).margins, table[:, 7:23])
    assert np.all(src.terminal_bound >= table[:, 14:].max(axis=1) - 1e-12)


@given(st.integers(0, 2**32 - 1))
def test_baseline_margins_bound_error_dynamics(seed):
    """Observer and prediction errors sampled inside the boxes stay within both margins."""
    rng = np.random.default_rng(seed)
    model = di_model()
    E0 = observer_error_limit(model)
    T, n_samp = 20, 2000
    two = two_set_tightening(T, model, E0)
    one = single_set_tightening(T, model, E0)
    z = rng.uniform(-1, 1, (n_samp, E0.G.shape[1]))
    e = z @ E0.G.T
    xi = np.zeros_like(e)
    L, LC = model.L, model.L @ DI.C
    FGK = DI_CONS.closed_loop_rows(DI_K)
    for k in range(T + 1):
        realized = (xi @ FGK.T + e @ DI_CONS.F.T).max(axis=0)
        assert np.all(realized <= one[:, k] + 1e-9)
        assert np.all(one[:, k] <= two[:, k] + 1e-9)
        w = rng.uniform(-1, 1, (n_samp, 2)) * model.W.half_widths
        v = rng.uniform(-1, 1, (n_samp, 1)) * model.V.half_widths
        xi = xi @ model.A_K.T - e @ LC.T - v @ L.T
        e = e @ model.A_L.T + w + v @ L.T
