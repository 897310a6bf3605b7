"""Ellipsoidal set-membership state estimation.

The true state is guaranteed to lie in
``{x : (x - xhat_k)^T P_k^{-1} (x - xhat_k) <= 1 - delta_k^2}``.  The shape
sequence ``P_k`` does not depend on measurements, so it is precomputed once
(:class:`ShapeSchedule`) and shared by the estimator and the tube.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import (
    DivergenceError,
    EstimatorError,
    InadmissibleDisturbanceError,
    InvalidArgumentError,
    TuningError,
)
from .linsys import LinearSystem

_DELTA_SLACK = 1e-9


@dataclass(frozen=True)
class EstimatorParams:
    beta: float
    rho: float
    Q: np.ndarray  # state-disturbance shape, W = {w : w^T Q^-1 w <= 1}
    R: np.ndarray  # output-disturbance shape
    D: np.ndarray | None = None

    def __post_init__(self):
        if not (0 < self.beta < 1 and 0 < self.rho < 1):
            raise InvalidArgumentError(f"need 0 < beta, rho < 1, got {self.beta}, {self.rho}")
        Q = np.array(self.Q, dtype=float, ndmin=2)
        R = np.array(self.R, dtype=float, ndmin=2)
        for name, M in (("Q", Q), ("R", R)):
            if np.linalg.eigvalsh(0.5 * (M + M.T)).min() <= 0:
                raise InvalidArgumentError(f"{name} must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        if self.D is not None:
            object.__setattr__(self, "D", np.array(self.D, dtype=float, ndmin=2))

    def disturbance_map(self, system: LinearSystem) -> np.ndarray:
        return system.D if self.D is None else self.D

    @property
    def decay(self) -> float:
        """Per-step factor ``(1 - beta)(1 - rho)`` on ``delta^2``."""
        return (1.0 - self.beta) * (1.0 - self.rho)


@dataclass(frozen=True)
class EstimatorState:
    xhat: np.ndarray
    P: np.ndarray
    delta_sq: float = 0.0
    k: int = 0

    def error_bound_matrix(self) -> np.ndarray:
        return (1.0 - self.delta_sq) * self.P


def _sym(M):
    return 0.5 * (M + M.T)


def _spd_inv(M, what: str) -> np.ndarray:
    try:
        c, low = scipy.linalg.cho_factor(M)
    except np.linalg.LinAlgError as exc:
        raise EstimatorError(f"{what} is not positive definite (cond={np.linalg.cond(M):.3g})") from exc
    inv = scipy.linalg.cho_solve((c, low), np.eye(M.shape[0]))
    return _sym(inv)


def shape_step(P_kk, params: EstimatorParams, system: LinearSystem):
    """One step of the shape recursion: returns ``(P_{k+1|k}, P_{k+1|k+1})``."""
    A, C = system.A, system.C
    D = params.disturbance_map(system)
    P_pred = _sym(A @ P_kk @ A.T / (1.0 - params.beta) + D @ params.Q @ D.T / params.beta)
    info = (1.0 - params.rho) * _spd_inv(P_pred, "predicted shape")
    info = info + params.rho * C.T @ _spd_inv(params.R, "R") @ C
    P_next = _spd_inv(_sym(info), "posterior information")
    return P_pred, P_next


def _innovation_weight(P_pred, params: EstimatorParams, system: LinearSystem) -> np.ndarray:
    C = system.C
    return _sym(C @ P_pred @ C.T / (1.0 - params.rho) + params.R / params.rho)


def measurement_update(
    state: EstimatorState,
    u,
    y_next,
    params: EstimatorParams,
    system: LinearSystem,
    shapes: tuple[np.ndarray, np.ndarray] | None = None,
) -> EstimatorState:
    """Advance the estimate with input ``u_k`` and measurement ``y_{k+1}``.

    ``shapes`` optionally supplies precomputed ``(P_{k+1|k}, P_{k+1|k+1})`` so
    that the estimator and the tube use bit-identical matrices.
    """
    A, B, C = system.A, system.B, system.C
    y_next = np.asarray(y_next, dtype=float).reshape(-1)
    if y_next.shape != (system.p,):
        raise InvalidArgumentError(f"measurement must have dim {system.p}")
    P_pred, P_next = shape_step(state.P, params, system) if shapes is None else shapes
    x_pred = A @ state.xhat + B @ np.atleast_1d(np.asarray(u, float))
    innov = y_next - C @ x_pred
    R_inv = _spd_inv(params.R, "R")
    xhat = x_pred + params.rho * P_next @ C.T @ R_inv @ innov
    S = _innovation_weight(P_pred, params, system)
    quad = float(innov @ np.linalg.solve(S, innov))
    delta_sq = params.decay * state.delta_sq + quad
    if delta_sq > 1.0 + _DELTA_SLACK:
        raise InadmissibleDisturbanceError(
            f"delta^2 = {delta_sq:.6g} > 1 at k={state.k + 1}: data outside the disturbance bounds"
        )
    return EstimatorState(xhat, P_next, min(max(delta_sq, 0.0), 1.0), state.k + 1)


def steady_state_shape(
    params: EstimatorParams,
    system: LinearSystem,
    Psi=None,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Fixed point of :func:`shape_step` iterated from ``Psi`` (identity by default)."""
    P = np.eye(system.n) if Psi is None else np.array(Psi, dtype=float)
    for _ in range(max_iter):
        _, P_next = shape_step(P, params, system)
        if not np.all(np.isfinite(P_next)):
            break
        if np.linalg.norm(P_next - P) < tol * np.linalg.norm(P):
            return P_next
        P = P_next
    raise DivergenceError(f"shape recursion did not converge (beta={params.beta}, rho={params.rho})")


def steady_state_shape_riccati(params: EstimatorParams, system: LinearSystem) -> np.ndarray:
    """Closed-form fixed point through an equivalent Kalman-filter Riccati equation.

    With ``M = P_pred / (1 - rho)`` the recursion reads
    ``M = A' (M^-1 + C^T R'^-1 C)^-1 A'^T + Q'`` where
    ``A' = A / sqrt((1-beta)(1-rho))``, ``Q' = D Q D^T / (beta (1-rho))`` and
    ``R' = R / rho``.
    """
    A, C = system.A, system.C
    D = params.disturbance_map(system)
    s = np.sqrt(params.decay)
    Qp = _sym(D @ params.Q @ D.T) / (params.beta * (1.0 - params.rho))
    Rp = params.R / params.rho
    M = scipy.linalg.solve_discrete_are((A / s).T, C.T, Qp, Rp)
    info = np.linalg.inv(_sym(M)) + C.T @ np.linalg.inv(Rp) @ C
    return _sym(np.linalg.inv(info))


@dataclass
class ShapeSchedule:
    """Precomputed ``P_{k|k}`` and ``P_{k+1|k}``; constant at ``P_inf`` after convergence."""

    params: EstimatorParams
    system: LinearSystem
    Psi: np.ndarray
    tol: float = 1e-10
    max_iter: int = 100_000
    posterior: list = field(init=False, repr=False)
    prior: list = field(init=False, repr=False)

    def __post_init__(self):
        P = _sym(np.array(self.Psi, dtype=float))
        self.posterior = [P]
        self.prior = []
        for _ in range(self.max_iter):
            P_pred, P_next = shape_step(P, self.params, self.system)
            if not np.all(np.isfinite(P_next)):
                break
            converged = np.linalg.norm(P_next - P) < self.tol * np.linalg.norm(P)
            self.prior.append(P_pred)
            self.posterior.append(P_next)
            P = P_next
            if converged:
                break
        else:
            raise DivergenceError("shape recursion did not converge")
        if not np.all(np.isfinite(P)):
            raise DivergenceError("shape recursion diverged")
        # the last posterior is a fixed point; its prior is reused from here on
        self.P_inf = self.posterior[-1]
        self.P_inf_prior = self.prior[-1]
        for arr in self.posterior + self.prior:
            arr.setflags(write=False)

    @property
    def converged_at(self) -> int:
        return len(self.posterior) - 1

    def __getitem__(self, k: int) -> np.ndarray:
        """``P_{k|k}``."""
        return self.posterior[k] if k < len(self.posterior) else self.P_inf

    def step(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """``(P_{k+1|k}, P_{k+1|k+1})`` for the update from time ``k``."""
        if k < len(self.prior):
            return self.prior[k], self.posterior[k + 1]
        return self.P_inf_prior, self.P_inf

    def steady_index(self, rel_tol: float) -> int:
        """First ``k`` from which ``||P_j - P_inf|| < rel_tol ||P_inf||`` for all ``j >= k``."""
        ref = np.linalg.norm(self.P_inf)
        k = len(self.posterior) - 1
        while k > 0 and np.linalg.norm(self.posterior[k - 1] - self.P_inf) < rel_tol * ref:
            k -= 1
        return k

    def excess_factor(self, start: int) -> float:
        """Smallest ``g >= 1`` with ``P_j <= g^2 P_inf`` for every ``j >= start``."""
        L = np.linalg.cholesky(self.P_inf)
        worst = 1.0
        for P in self.posterior[start:]:
            T = np.linalg.solve(L, np.linalg.solve(L, P).T)
            worst = max(worst, float(np.linalg.eigvalsh(_sym(T)).max()))
        return float(np.sqrt(worst))


@dataclass(frozen=True)
class TuningResult:
    beta: float
    rho: float
    trace: float
    evaluated: int


def _trace_or_inf(beta, rho, system, Q, R, D) -> float:
    try:
        P = steady_state_shape_riccati(EstimatorParams(beta, rho, Q, R, D), system)
    except (np.linalg.LinAlgError, ValueError):
        return np.inf
    t = float(np.trace(P))
    if not np.isfinite(t) or np.linalg.eigvalsh(P).min() <= 0:
        return np.inf
    return t


def tune_params(
    system: LinearSystem,
    Q,
    R,
    grid_step: float = 0.02,
    D=None,
    order=None,
) -> TuningResult:
    """Grid search for ``(beta, rho)`` minimizing ``trace(P_inf)``.

    A coarse grid over the open unit square is followed by one refinement pass
    at ``grid_step / 10`` around the best cell.  Ties go to the
    lexicographically smallest pair, so the result does not depend on the
    evaluation order (``order`` permutes it, for testing).
    """
    if not 0 < grid_step <= 0.5:
        raise InvalidArgumentError("grid_step must be in (0, 0.5]")
    count = int(round(1.0 / grid_step))
    coarse = [round(i * grid_step, 12) for i in range(1, count) if i * grid_step < 1]
    best = (np.inf, np.inf, np.inf)
    evaluated = 0

    def scan(points):
        nonlocal best, evaluated
        pts = list(points)
        if order is not None:
            pts = [pts[i] for i in order(len(pts))]
        for b, r in pts:
            t = _trace_or_inf(b, r, system, Q, R, D)
            evaluated += 1
            if np.isfinite(t) and (t, b, r) < best:
                best = (t, b, r)

    scan(itertools.product(coarse, coarse))
    if not np.isfinite(best[0]):
        raise TuningError("no grid point yields a convergent shape recursion")
    fine = grid_step / 10.0
    _, b0, r0 = best
    span = [round(j * fine, 12) for j in range(-10, 11)]
    refine = [
        (round(b0 + db, 12), round(r0 + dr, 12))
        for db in span
        for dr in span
        if 0 < b0 + db < 1 and 0 < r0 + dr < 1
    ]
    scan(refine)
    t, b, r = best
    return TuningResult(b, r, t, evaluated)


def initial_state(xhat0, Psi) -> EstimatorState:
    return EstimatorState(np.asarray(xhat0, float).copy(), _sym(np.asarray(Psi, float)), 0.0, 0)


def with_params(params: EstimatorParams, beta: float, rho: float) -> EstimatorParams:
    return replace(params, beta=beta, rho=rho)
