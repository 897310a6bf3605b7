"""Linear system containers, LQR synthesis and the quadrotor model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError, SynthesisError


def _mat(a, name: str) -> np.ndarray:
    m = np.array(a, dtype=float, ndmin=2)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise InvalidArgumentError(f"{name} must be a finite 2-D array")
    return m


@dataclass(frozen=True)
class LinearSystem:
    """``x+ = A x + B u + D w``, ``y = C x + v``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray | None = None

    def __post_init__(self):
        A, B, C = _mat(self.A, "A"), _mat(self.B, "B"), _mat(self.C, "C")
        n = A.shape[0]
        D = np.eye(n) if self.D is None else _mat(self.D, "D")
        if A.shape != (n, n):
            raise InvalidArgumentError("A must be square")
        if B.shape[0] != n or C.shape[1] != n or D.shape[0] != n:
            raise InvalidArgumentError(
                f"inconsistent dims: A{A.shape} B{B.shape} C{C.shape} D{D.shape}"
            )
        for k, v in (("A", A), ("B", B), ("C", C), ("D", D)):
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def q(self) -> int:
        return self.D.shape[1]

    def closed_loop(self, K) -> np.ndarray:
        return self.A + self.B @ np.asarray(K, dtype=float)


@dataclass(frozen=True)
class QuadrotorParams:
    """Mass (kg), gravity (m/s^2), diagonal inertia (kg m^2) and sample time (s)."""

    mass: float = 1.5
    gravity: float = 9.81
    inertia: tuple[float, float, float] = (0.03, 0.03, 0.05)
    dt: float = 0.2

    def __post_init__(self):
        vals = (self.mass, self.gravity, *self.inertia, self.dt)
        if len(self.inertia) != 3 or not all(np.isfinite(v) and v > 0 for v in vals):
            raise InvalidArgumentError("quadrotor parameters must all be positive")


@dataclass(frozen=True)
class CostWeights:
    state: np.ndarray
    input: np.ndarray
    terminal: np.ndarray | None = field(default=None)

    def __post_init__(self):
        for name in ("state", "input", "terminal"):
            val = getattr(self, name)
            if val is None:
                continue
            M = _mat(val, name)
            if M.shape[0] != M.shape[1] or np.max(np.abs(M - M.T)) > 1e-10 * max(1, np.abs(M).max()):
                raise InvalidArgumentError(f"{name} weight must be symmetric")
            if np.linalg.eigvalsh(M).min() <= 0:
                raise InvalidArgumentError(f"{name} weight must be positive definite")
            object.__setattr__(self, name, M)

    def stage_cost(self, x, u) -> float:
        x, u = np.asarray(x, float), np.asarray(u, float)
        return 0.5 * float(x @ self.state @ x + u @ self.input @ u)

    def terminal_cost(self, x) -> float:
        x = np.asarray(x, float)
        return 0.5 * float(x @ self.terminal @ x)


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(M, float)))))


def lqr_gain(A, B, P, R) -> np.ndarray:
    """``K = -(R + B^T P B)^{-1} B^T P A`` (control law ``u = K x``)."""
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def dare_solve(A, B, Q, R, tol: float = 1e-10, max_iter: int = 100_000):
    """Infinite-horizon LQR by fixed-point iteration of the Riccati recursion.

    Returns ``(P, K)`` with ``u = K x``.  Raises :class:`SynthesisError` if the
    iteration does not settle, which signals a non-stabilizable pair.
    """
    A, B, Q, R = (_mat(v, n) for v, n in ((A, "A"), (B, "B"), (Q, "Q"), (R, "R")))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        P_next = Q + A.T @ P @ A - (A.T @ P @ B) @ np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            break
        if np.linalg.norm(P_next - P) <= tol * np.linalg.norm(P_next):
            P = _newton_refine(P_next, A, B, Q, R)
            K = lqr_gain(A, B, P, R)
            if spectral_radius(A + B @ K) >= 1:
                raise SynthesisError("Riccati iteration converged to a non-stabilizing solution")
            return P, K
        P = P_next
    raise SynthesisError("Riccati iteration did not converge; (A, B) is likely not stabilizable")


def _newton_refine(P, A, B, Q, R, steps: int = 6):
    """Policy-iteration polish: the fixed point stops at a relative step size,
    which leaves an absolute residual proportional to ``|P|``."""
    best, best_res = P, riccati_residual(P, A, B, Q, R)
    for _ in range(steps):
        K = lqr_gain(A, B, P, R)
        AK = A + B @ K
        if spectral_radius(AK) >= 1:
            break
        P = scipy.linalg.solve_discrete_lyapunov(AK.T, Q + K.T @ R @ K)
        P = 0.5 * (P + P.T)
        res = riccati_residual(P, A, B, Q, R)
        if not res < best_res:
            break
        best, best_res = P, res
    return best


def riccati_residual(P, A, B, Q, R) -> float:
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return float(np.linalg.norm(P - rhs))


def policy_cost_matrix(A, B, K, Q, R) -> np.ndarray:
    """Cost-to-go ``P`` of the fixed policy ``u = K x``.

    Solves ``P = A_K^T P A_K + Q + K^T R K``; equals the Riccati solution when
    ``K`` is the LQR gain, and keeps ``p(A_K x) - p(x) + q(x, K x) = 0`` exact
    when ``K`` is only an approximation of it.
    """
    AK = A + B @ K
    if spectral_radius(AK) >= 1:
        raise SynthesisError("A + BK is not Schur stable")
    P = scipy.linalg.solve_discrete_lyapunov(AK.T, Q + K.T @ R @ K)
    return 0.5 * (P + P.T)


# quadrotor ---------------------------------------------------------------
# state (p, v, Omega, omega), Omega = (phi, theta, psi) in 3-2-1 order,
# z axis pointing down so that gravity is +g e3 and thrust acts along -R e3.


def _rotation_321(phi, theta, psi):
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cps, sps = np.cos(psi), np.sin(psi)
    Rz = np.array([[cps, -sps, 0], [sps, cps, 0], [0, 0, 1]])
    Ry = np.array([[cth, 0, sth], [0, 1, 0], [-sth, 0, cth]])
    Rx = np.array([[1, 0, 0], [0, cph, -sph], [0, sph, cph]])
    return Rz @ Ry @ Rx


def _euler_rate_map(phi, theta):
    cph, sph = np.cos(phi), np.sin(phi)
    cth, tth = np.cos(theta), np.tan(theta)
    return np.array(
        [
            [1.0, sph * tth, cph * tth],
            [0.0, cph, -sph],
            [0.0, sph / cth, cph / cth],
        ]
    )


def quadrotor_rhs(x, u, params: QuadrotorParams) -> np.ndarray:
    """Nonlinear rigid-body dynamics; ``u = (T, Mx, My, Mz)`` with absolute thrust."""
    x = np.asarray(x, float)
    p, v, ang, w = x[0:3], x[3:6], x[6:9], x[9:12]
    T, M = u[0], np.asarray(u[1:4], float)
    J = np.diag(params.inertia)
    R = _rotation_321(*ang)
    e3 = np.array([0.0, 0.0, 1.0])
    vdot = params.gravity * e3 - T * (R @ e3) / params.mass
    angdot = _euler_rate_map(ang[0], ang[1]) @ w
    wdot = np.linalg.solve(J, M - np.cross(w, J @ w))
    return np.concatenate([v, vdot, angdot, wdot])


def linearize_quadrotor(params: QuadrotorParams):
    """Continuous-time Jacobians at hover; the thrust input is the deviation from ``m g``."""
    g, m = params.gravity, params.mass
    Ac = np.zeros((12, 12))
    Bc = np.zeros((12, 4))
    Ac[0:3, 3:6] = np.eye(3)
    # tilt couples thrust into horizontal acceleration
    Ac[3, 7] = -g
    Ac[4, 6] = g
    Ac[6:9, 9:12] = np.eye(3)
    Bc[5, 0] = -1.0 / m
    Bc[9:12, 1:4] = np.diag(1.0 / np.asarray(params.inertia, float))
    return Ac, Bc


def discretize(Ac, Bc, dt: float):
    """Zero-order-hold discretization through the augmented matrix exponential."""
    if not dt > 0:
        raise InvalidArgumentError("dt must be positive")
    Ac, Bc = _mat(Ac, "A_c"), _mat(Bc, "B_c")
    n, m = Bc.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = Ac
    aug[:n, n:] = Bc
    E = scipy.linalg.expm(aug * dt)
    return E[:n, :n], E[:n, n:]


def quadrotor_system(params: QuadrotorParams) -> LinearSystem:
    """Discrete hover model with full-state measurement."""
    A, B = discretize(*linearize_quadrotor(params), params.dt)
    return LinearSystem(A, B, np.eye(12))


@dataclass(frozen=True)
class MixedConstraints:
    """``F x + G u <= f`` with ``d`` rows."""

    F: np.ndarray
    G: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        F, G = _mat(self.F, "F"), _mat(self.G, "G")
        f = np.array(self.f, dtype=float).reshape(-1)
        if F.shape[0] != G.shape[0] or F.shape[0] != f.size:
            raise InvalidArgumentError(f"constraint rows disagree: F{F.shape} G{G.shape} f{f.shape}")
        if not np.all(np.isfinite(f)):
            raise InvalidArgumentError("f must be finite")
        for k, v in (("F", F), ("G", G), ("f", f)):
            object.__setattr__(self, k, v)

    @property
    def d(self) -> int:
        return self.f.size

    def closed_loop_rows(self, K) -> np.ndarray:
        """``F + G K``: the rows acting on a state driven by ``u = K x``."""
        return self.F + self.G @ np.asarray(K, float)

    def slack(self, x, u) -> np.ndarray:
        return self.f - self.F @ np.asarray(x, float) - self.G @ np.atleast_1d(np.asarray(u, float))

    @classmethod
    def from_boxes(cls, n: int, m: int, state_bounds=(), input_bounds=()):
        """Stack two-sided bounds ``lo <= x_i <= hi`` given as ``(index, lo, hi)`` triples."""
        F_rows, G_rows, f = [], [], []
        for bounds, width, is_state in ((state_bounds, n, True), (input_bounds, m, False)):
            for idx, lo, hi in bounds:
                e = np.zeros(width)
                e[idx] = 1.0
                for sign, val in ((1.0, hi), (-1.0, -lo)):
                    if not np.isfinite(val):
                        continue
                    fx = sign * e if is_state else np.zeros(n)
                    gu = np.zeros(m) if is_state else sign * e
                    F_rows.append(fx)
                    G_rows.append(gu)
                    f.append(val)
        return cls(np.array(F_rows).reshape(-1, n), np.array(G_rows).reshape(-1, m), np.array(f))
