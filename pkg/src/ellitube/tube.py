"""Ellipsoidal control-error tubes and the constraint tightening built on them.

The control error ``s = x - xbar`` obeys ``s+ = A_K s + w - BK e`` with
``e = x - xhat``.  Its bounding sets are kept as :class:`SummandList` objects
and only ever queried through support functions, so no Minkowski sum is formed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ellipsoid import Ellipsoid, SummandList, support, summand_support
from .errors import InvalidArgumentError, SynthesisError
from .estimator import ShapeSchedule
from .linsys import MixedConstraints, spectral_radius

log = logging.getLogger(__name__)

_PAD = 1e-9


@dataclass(frozen=True)
class ErrorBound:
    """``{e : e^T P^{-1} e <= radius_sq}``."""

    P: np.ndarray
    radius_sq: float

    def ellipsoid(self) -> Ellipsoid:
        return Ellipsoid(self.P, np.sqrt(max(self.radius_sq, 0.0)))

    def factor(self) -> np.ndarray:
        return np.sqrt(max(self.radius_sq, 0.0)) * np.linalg.cholesky(self.P)


def error_bound(i: int, delta_sq_k: float, P_schedule, decay: float, k: int = 0) -> ErrorBound:
    """Bound on the estimation error ``i`` steps after time ``k``.

    ``P_schedule[k + i]`` must give ``P_{k+i|k+i}``; ``decay`` is
    ``(1 - beta)(1 - rho)``.  Information carried by ``delta_k^2`` fades
    geometrically, so the radius grows back towards one.
    """
    if i < 0:
        raise InvalidArgumentError("i must be nonnegative")
    return ErrorBound(P_schedule[k + i], 1.0 - decay**i * delta_sq_k)


@dataclass(frozen=True)
class TubeState:
    summands: SummandList
    k: int = 0

    @classmethod
    def start(cls, E0: Ellipsoid) -> "TubeState":
        return cls(SummandList([(np.eye(E0.dim), E0)]), 0)

    def support(self, c):
        return summand_support(self.summands, c)


def tube_advance(tube: TubeState, E_now: Ellipsoid, A_K, BK, W: Ellipsoid) -> TubeState:
    """``S_{k+1} = A_K S_k (+) W (+) -BK E_{k|k}``."""
    A_K = np.asarray(A_K, float)
    BK = np.asarray(BK, float)
    n = A_K.shape[0]
    if W.dim != n or BK.shape != (n, E_now.dim):
        raise InvalidArgumentError("tube_advance: dimension mismatch")
    s = tube.summands.transformed(A_K).extended((np.eye(n), W), (-BK, E_now))
    return TubeState(s, tube.k + 1)


@dataclass(frozen=True)
class TighteningSchedule:
    """``margins[row, i]`` tightens row ``row`` at prediction step ``i``."""

    margins: np.ndarray
    k: int = 0

    @property
    def terminal_margin(self) -> np.ndarray:
        return self.margins[:, -1]

    @property
    def horizon(self) -> int:
        return self.margins.shape[1] - 1


@dataclass(frozen=True)
class TubeModel:
    """Everything the tightening needs that is fixed offline."""

    A_K: np.ndarray
    BK: np.ndarray
    W: Ellipsoid
    constraints: MixedConstraints
    K: np.ndarray
    shapes: ShapeSchedule
    decay: float

    @property
    def rows(self) -> np.ndarray:
        """``(F + G K)`` rows: directions acting on the control error."""
        return self.constraints.closed_loop_rows(self.K)

    @property
    def gk_rows(self) -> np.ndarray:
        return self.constraints.G @ self.K

    @classmethod
    def build(cls, system, K, W: Ellipsoid, constraints: MixedConstraints, shapes: ShapeSchedule):
        K = np.atleast_2d(np.asarray(K, float))
        A_K = system.closed_loop(K)
        if spectral_radius(A_K) >= 1:
            raise SynthesisError("A + BK is not Schur stable")
        return cls(A_K, system.B @ K, W, constraints, K, shapes, shapes.params.decay)


def _direction_powers(rows, A_K, count):
    """``out[l] = rows @ A_K^l`` for ``l < count``, i.e. ``(A_K^l)^T c`` per row."""
    out = np.empty((count,) + rows.shape)
    cur = rows.copy()
    for l in range(count):
        out[l] = cur
        cur = cur @ A_K
    return out


def prediction_schedule(tube: TubeState, delta_sq: float, N: int, model: TubeModel) -> TighteningSchedule:
    """Margins for ``i = 0..N`` computed at time ``tube.k`` from ``S_k`` and ``delta_k^2``.

    ``margin[row, i] = h(S_{k+i|k}, (F+GK)^T row) + h(E_{k+i|k}, (GK)^T row)``
    where ``S_{k+i|k}`` is ``S_k`` pushed forward with the predicted error
    bounds.  The sign of ``-BK e`` and ``-GK e`` is irrelevant because every
    error set is centrally symmetric.
    """
    if N < 0:
        raise InvalidArgumentError("N must be nonnegative")
    k = tube.k
    rows = model.rows
    d = rows.shape[0]
    D = _direction_powers(rows, model.A_K, N + 1)  # (N+1, d, n)
    margins = np.asarray(tube.support(D), dtype=float).T.copy()  # (d, N+1)
    hW = support(model.W, D)  # (N+1, d)
    margins[:, 1:] += np.cumsum(hW[:-1], axis=0).T
    gk = model.gk_rows
    DB = D @ model.BK  # directions pulled back through BK
    for j in range(N + 1):
        Lj = error_bound(j, delta_sq, model.shapes, model.decay, k).factor()
        margins[:, j] += np.linalg.norm(gk @ Lj, axis=-1)
        if j < N:
            # error at step k+j enters the tube at steps j+1..N
            contrib = np.linalg.norm(DB[: N - j] @ Lj, axis=-1)  # (N-j, d)
            margins[:, j + 1 :] += contrib.T
    return TighteningSchedule(margins, k)


# time-invariant tightening -------------------------------------------------


@dataclass(frozen=True)
class ContractionParams:
    r1: int
    r2: int
    alpha1: float
    alpha2: float
    theta_shape: np.ndarray  # shape of the full-dimensional set containing BK * E_inf


def contraction_factor(A, shape, r: int) -> float:
    """Smallest ``alpha`` with ``A^r X`` inside ``alpha X`` for ``X = {x : x^T shape^-1 x <= 1}``."""
    L = np.linalg.cholesky(shape)
    M = np.linalg.matrix_power(np.asarray(A, float), r)
    return float(np.linalg.norm(np.linalg.solve(L, M @ L), 2))


def _first_power(A, shape, cap, r_max, what):
    L = np.linalg.cholesky(shape)
    M = np.asarray(A, float)
    cur = np.eye(M.shape[0])
    best = np.inf
    for r in range(1, r_max + 1):
        cur = cur @ M
        alpha = float(np.linalg.norm(np.linalg.solve(L, cur @ L), 2))
        best = min(best, alpha)
        if alpha <= cap:
            return r, alpha
    raise SynthesisError(f"{what}: alpha <= {cap} not reached for r <= {r_max} (best {best:.4g})")


def theta_bounding_shape(BK, E_shape) -> np.ndarray:
    """Shape of a full-dimensional ellipsoid containing ``BK * E``.

    When ``BK`` has full row rank this is the image itself; otherwise the
    degenerate image is padded by ``1e-9 I``.
    """
    BK = np.asarray(BK, float)
    S = BK @ E_shape @ BK.T
    S = 0.5 * (S + S.T)
    if np.linalg.matrix_rank(BK) < BK.shape[0]:
        S = S + _PAD * np.eye(BK.shape[0])
    return S


def contraction_params(A_K, W: Ellipsoid, E_tilde: Ellipsoid, BK, alpha_cap: float = 0.05, r_max: int = 500):
    if not 0 < alpha_cap < 1:
        raise InvalidArgumentError("alpha_cap must lie in (0, 1)")
    if spectral_radius(A_K) >= 1:
        raise SynthesisError("A_K is not Schur stable")
    theta = theta_bounding_shape(BK, E_tilde.matrix)
    r1, a1 = _first_power(A_K, W.matrix, alpha_cap, r_max, "state disturbance")
    r2, a2 = _first_power(A_K, theta, alpha_cap, r_max, "estimation error")
    return ContractionParams(r1, r2, a1, a2, theta)


def _psd_factor(S) -> np.ndarray:
    """``L`` with ``L L^T = S`` for a possibly singular PSD ``S``."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def _sum_supports(shape, D, count):
    if count == 0:
        return np.zeros(D.shape[1])
    L = _psd_factor(shape)
    return np.linalg.norm(D[:count] @ L, axis=-1).sum(axis=0)


def time_invariant_tightening(
    cp: ContractionParams,
    W: Ellipsoid,
    E_tilde: Ellipsoid,
    constraints: MixedConstraints,
    K,
    A_K,
    BK=None,
    scale: float = 1.0,
) -> np.ndarray:
    """Steady-state margin per constraint row.

    Bounds the support of the minimal invariant set of the control error by
    finite sums inflated with ``1 / (1 - alpha)``.  ``scale`` enlarges the
    steady-state estimation-error set uniformly (``P_j <= scale^2 P_inf``).
    """
    K = np.atleast_2d(np.asarray(K, float))
    rows = constraints.closed_loop_rows(K)
    D = _direction_powers(rows, np.asarray(A_K, float), max(cp.r1, cp.r2))
    w_part = _sum_supports(W.matrix, D, cp.r1) / (1.0 - cp.alpha1)
    e_part = _sum_supports(cp.theta_shape, D, cp.r2) / (1.0 - cp.alpha2)
    gk = constraints.G @ K
    direct = support(E_tilde, gk) if gk.size else np.zeros(rows.shape[0])
    return w_part + scale * (e_part + direct)


def series_upper_bound(cp: ContractionParams, W: Ellipsoid, E_tilde: Ellipsoid, model: TubeModel, scale=1.0, blocks=60):
    """Tighter bound on the same infinite series, used to certify the switch.

    Sums ``blocks * r`` terms explicitly and bounds the remainder with
    ``alpha^blocks / (1 - alpha)`` times the first block.
    """
    rows = model.rows
    D = _direction_powers(rows, model.A_K, blocks * max(cp.r1, cp.r2))
    w_first = _sum_supports(W.matrix, D, cp.r1)
    e_first = _sum_supports(cp.theta_shape, D, cp.r2)
    w_sum = _sum_supports(W.matrix, D, blocks * cp.r1) + cp.alpha1**blocks / (1 - cp.alpha1) * w_first
    e_sum = _sum_supports(cp.theta_shape, D, blocks * cp.r2) + cp.alpha2**blocks / (1 - cp.alpha2) * e_first
    direct = support(E_tilde, model.gk_rows)
    return w_sum + scale * (e_sum + direct)


# switching to the time-invariant tightening --------------------------------


def worst_case_margins(model: TubeModel, horizon: int) -> np.ndarray:
    """``m[:, t]`` bounds the tightening needed at absolute time ``t`` whatever the data.

    With ``delta = 0`` throughout, every error bound has radius one and the
    tube started at ``k = 0`` contains every tube reachable online.
    """
    E0 = Ellipsoid(model.shapes[0])
    return prediction_schedule(TubeState.start(E0), 0.0, horizon, model).margins


def _power_norm_bound(A, upto):
    """``b[i] >= ||A^i||_2`` for ``i < upto`` (exact) and a geometric tail rule."""
    norms = [1.0]
    cur = np.eye(A.shape[0])
    for _ in range(1, upto):
        cur = cur @ A
        norms.append(float(np.linalg.norm(cur, 2)))
    return np.array(norms)


@dataclass(frozen=True)
class SwitchPlan:
    """Offline decision on when the online tightening may be replaced by constants."""

    index: int | None
    gamma: float
    steady_margins: np.ndarray
    terminal_bound: np.ndarray
    contraction: ContractionParams
    worst_case: np.ndarray = field(repr=False)


def plan_switch(
    model: TubeModel,
    N: int,
    alpha_cap: float = 0.05,
    rel_tol: float = 1e-6,
    max_delay: int = 200,
    min_horizon: int = 0,
) -> SwitchPlan:
    """Find the first time from which the time-invariant margins are safe.

    A candidate ``t_s`` is accepted once ``P_t`` has settled and the
    worst-case margin ``m(t)`` stays below the steady value for every
    ``t >= t_s``: explicitly up to a horizon beyond which the decaying
    transient of ``S_{t_s}`` is provably smaller than the gap between the
    steady value and the true series.  ``terminal_bound`` dominates every
    margin the closed loop can place at prediction step ``N - 1``.
    """
    shapes = model.shapes
    P_inf = shapes.P_inf
    E_inf = Ellipsoid(P_inf)
    cp = contraction_params(model.A_K, model.W, E_inf, model.BK, alpha_cap)
    rows = model.rows
    row_norm = np.linalg.norm(rows, axis=1)
    start = shapes.steady_index(rel_tol)

    # ||A_K^i|| bound: exact for i < p, then geometric in blocks of p
    p = 1
    while np.linalg.norm(np.linalg.matrix_power(model.A_K, p), 2) >= 0.5:
        p += 1
        if p > 10_000:
            raise SynthesisError("A_K contracts too slowly to certify a switch")
    head = _power_norm_bound(model.A_K, p)
    kappa, q = head.max(), float(np.linalg.norm(np.linalg.matrix_power(model.A_K, p), 2))

    horizon = max(start + max_delay, N, min_horizon) + 8 * p + 1
    m = worst_case_margins(model, horizon)

    for t_s in range(start, start + max_delay + 1):
        gamma = shapes.excess_factor(t_s)
        ti = time_invariant_tightening(cp, model.W, E_inf, model.constraints, model.K, model.A_K, model.BK, gamma)
        gap = ti - series_upper_bound(cp, model.W, E_inf, model, gamma)
        # size of S_{t_s} in the worst case, through its factors
        tube = TubeState.start(Ellipsoid(shapes[0]))
        for t in range(t_s):
            tube = tube_advance(tube, Ellipsoid(shapes[t]), model.A_K, model.BK, model.W)
        mass = sum(np.linalg.norm(G, 2) for G in tube.summands.factors())
        need = row_norm * mass * kappa  # transient bound for q^b with b blocks
        active = need > 0
        if np.any(gap[active] <= 0):
            continue
        with np.errstate(divide="ignore"):
            blocks = np.where(active, np.ceil(np.log(np.maximum(gap, 1e-300) / np.maximum(need, 1e-300)) / np.log(q)), 0)
        I = int(max(0, blocks.max())) * p
        end = t_s + I
        if end + 1 > m.shape[1]:
            m = worst_case_margins(model, end + N + 1)
        if np.all(m[:, t_s : end + 1] <= ti[:, None] + 1e-12):
            lo = max(N - 1, 0)
            early = m[:, lo:t_s] if t_s > lo else np.zeros((rows.shape[0], 0))
            term = np.max(np.column_stack([ti, early]), axis=1) if early.size else ti
            return SwitchPlan(t_s, gamma, ti, term, cp, m)
    log.warning("could not certify the time-invariant switch; staying time-varying")
    gamma = shapes.excess_factor(start)
    ti = time_invariant_tightening(cp, model.W, E_inf, model.constraints, model.K, model.A_K, model.BK, gamma)
    return SwitchPlan(None, gamma, ti, np.max(np.column_stack([ti, m[:, max(N - 1, 0):]]), axis=1), cp, m)


class ProposedTighteningSource:
    """Online margins for the closed loop.

    Before the switch the tube follows the measured ``delta_k^2``; after it the
    time-invariant values are used.  Each new margin is capped by the one
    computed a step earlier for the same absolute time, which keeps successive
    schedules nested even across the switch.
    """

    kind = "proposed"

    def __init__(self, model: TubeModel, N: int, plan: SwitchPlan, use_switch: bool = True):
        self.model = model
        self.N = N
        self.plan = plan
        self.switch_at = plan.index if use_switch else None
        self.tube = TubeState.start(Ellipsoid(model.shapes[0]))
        self._prev: np.ndarray | None = None

    @property
    def terminal_bound(self) -> np.ndarray:
        return self.plan.terminal_bound

    def _fresh(self, k: int, delta_sq: float) -> np.ndarray:
        if self.switch_at is not None and k >= self.switch_at:
            return np.repeat(self.plan.steady_margins[:, None], self.N + 1, axis=1)
        return prediction_schedule(self.tube, delta_sq, self.N, self.model).margins

    def schedule(self, k: int, delta_sq: float) -> TighteningSchedule:
        if k != self.tube.k:
            raise InvalidArgumentError(f"schedule requested for k={k}, tube is at {self.tube.k}")
        fresh = self._fresh(k, delta_sq)
        if self._prev is not None:
            fresh[:, :-1] = np.minimum(fresh[:, :-1], self._prev[:, 1:])
        self._prev = fresh
        return TighteningSchedule(fresh, k)

    def advance(self, delta_sq: float) -> None:
        """Fold the current error bound ``E_{k|k}`` into the tube and move to ``k + 1``."""
        k = self.tube.k
        if self.switch_at is not None and k >= self.switch_at:
            self.tube = TubeState(self.tube.summands, k + 1)  # frozen after the switch
            return
        E_now = error_bound(0, delta_sq, self.model.shapes, self.model.decay, k).ellipsoid()
        self.tube = tube_advance(self.tube, E_now, self.model.A_K, self.model.BK, self.model.W)


def contraction_holds(cp: ContractionParams, A_K, W: Ellipsoid) -> bool:
    """Exact check that ``A_K^r1 W`` lies in ``alpha1 W`` and likewise for the error set."""
    A_K = np.asarray(A_K, float)
    M1 = np.linalg.matrix_power(A_K, cp.r1)
    M2 = np.linalg.matrix_power(A_K, cp.r2)
    ok1 = _contained_shape(M1 @ W.matrix @ M1.T, W.matrix, cp.alpha1)
    ok2 = _contained_shape(M2 @ cp.theta_shape @ M2.T, cp.theta_shape, cp.alpha2)
    return ok1 and ok2


def _contained_shape(inner_shape, outer_shape, alpha) -> bool:
    """``inner`` (possibly degenerate) inside ``alpha`` times ``outer``, both given by shape matrices."""
    L = np.linalg.cholesky(outer_shape)
    T = np.linalg.solve(L, np.linalg.solve(L, inner_shape).T)
    lam = float(np.linalg.eigvalsh(0.5 * (T + T.T)).max())
    return lam <= alpha**2 * (1 + 1e-9) + 1e-15
