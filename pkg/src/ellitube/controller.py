"""Terminal ingredients, the condensed optimal control problem and the control law."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import ContractViolation, InfeasibleTighteningError, InvalidArgumentError, SynthesisError
from .linsys import CostWeights, LinearSystem, MixedConstraints, spectral_radius
from .qp import solve_qp

_REDUNDANT_TOL = 1e-9


@dataclass(frozen=True)
class Polytope:
    """``{x : H x <= h}``."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.array(self.H, dtype=float, ndmin=2)
        h = np.array(self.h, dtype=float).reshape(-1)
        if H.shape[0] != h.size or not np.all(np.isfinite(h)):
            raise InvalidArgumentError("polytope rows and right-hand side disagree")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def contains(self, x, tol: float = 1e-9):
        x = np.asarray(x, float)
        ok = np.all(x @ self.H.T <= self.h + tol, axis=-1)
        return bool(ok) if np.ndim(ok) == 0 else ok

    def max_along(self, c) -> float:
        """``max c^T x`` over the polytope; ``inf`` when unbounded."""
        res = linprog(-np.asarray(c, float), A_ub=self.H, b_ub=self.h, bounds=[(None, None)] * self.dim, method="highs")
        if res.status == 3:
            return np.inf
        # HiGHS presolve may label an unbounded LP infeasible; a feasible set rules that out
        if res.status == 2 and _nonempty(self.H, self.h):
            return np.inf
        if res.status != 0:
            raise SynthesisError(f"support LP failed: {res.message}")
        return -res.fun

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Points drawn along random rays from the origin (the set must contain it)."""
        d = rng.standard_normal((count, self.dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        Hd = d @ self.H.T
        with np.errstate(divide="ignore"):
            ratio = np.where(Hd > 0, self.h / np.where(Hd > 0, Hd, 1.0), np.inf)
        reach = ratio.min(axis=1)
        if not np.all(np.isfinite(reach)):
            raise InvalidArgumentError("cannot sample an unbounded polytope")
        return d * (reach * rng.random(count))[:, None]


def _nonempty(H, h) -> bool:
    if np.all(h >= 0):
        return True  # the origin is a member
    res = linprog(np.zeros(H.shape[1]), A_ub=H, b_ub=h, bounds=[(None, None)] * H.shape[1], method="highs")
    return res.status == 0


def max_positive_invariant(A_K, H, h, iter_cap: int = 200) -> Polytope:
    """Largest set inside ``{H x <= h}`` that ``x+ = A_K x`` never leaves.

    Rows ``H A_K^t`` are appended until one full round of them is redundant,
    each redundancy certified by maximizing the row over the current set.
    """
    A_K = np.asarray(A_K, float)
    H = np.array(H, dtype=float, ndmin=2)
    h = np.asarray(h, float).reshape(-1)
    if spectral_radius(A_K) >= 1:
        raise SynthesisError("A_K must be Schur stable")
    if np.any(h <= 0):
        raise SynthesisError("constraint set does not contain the origin in its interior")
    omega = Polytope(H, h)
    Ht = H
    for _ in range(iter_cap):
        Ht = Ht @ A_K
        new = [(row, hi) for row, hi in zip(Ht, h) if omega.max_along(row) > hi + _REDUNDANT_TOL * max(1.0, abs(hi))]
        if not new:
            return omega
        omega = Polytope(np.vstack([omega.H] + [r for r, _ in new]), np.concatenate([omega.h, [hi for _, hi in new]]))
    raise SynthesisError(f"invariant set iteration did not terminate within {iter_cap} steps")


def terminal_ingredients(
    system: LinearSystem,
    weights: CostWeights,
    K,
    constraints: MixedConstraints,
    f_bar,
    iter_cap: int = 200,
    rng: np.random.Generator | None = None,
):
    """Terminal cost and set for the tightened problem.

    The set is the maximal invariant set of ``A + BK`` inside
    ``(F + GK) x <= f - f_bar``; the terminal cost must make
    ``p(A_K x) - p(x) + q(x, K x)`` vanish on it.
    """
    K = np.atleast_2d(np.asarray(K, float))
    rhs = constraints.f - np.asarray(f_bar, float)
    bad = np.flatnonzero(rhs <= 0)
    if bad.size:
        raise InfeasibleTighteningError(
            f"tightening exceeds the constraint on rows {bad.tolist()}: f - f_bar = {rhs[bad]}", bad
        )
    A_K = system.closed_loop(K)
    Xf = max_positive_invariant(A_K, constraints.closed_loop_rows(K), rhs, iter_cap)
    P = weights.terminal
    rng = np.random.default_rng(0) if rng is None else rng
    pts = Xf.sample(rng, 1000)
    M = A_K.T @ P @ A_K - P + weights.state + K.T @ weights.input @ K
    resid = 0.5 * np.einsum("ij,jk,ik->i", pts, M, pts)
    if np.abs(resid).max() > 1e-8:
        raise SynthesisError(f"terminal cost decrease condition violated by {np.abs(resid).max():.3g}")
    return P, Xf


@dataclass(frozen=True)
class OcpSolution:
    ubar_seq: np.ndarray | None  # (N, m)
    xbar_seq: np.ndarray | None  # (N + 1, n)
    value: float
    status: str

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


class CondensedOcp:
    """The nominal MPC problem with states eliminated through the dynamics.

    Decision variable: ``z = (u_0, ..., u_{N-1})``.  Everything that does not
    depend on the initial state or the margins is built once.
    """

    def __init__(self, system: LinearSystem, weights: CostWeights, constraints: MixedConstraints, terminal_set: Polytope, N: int):
        if N < 1:
            raise InvalidArgumentError("horizon must be at least 1")
        if weights.terminal is None:
            raise InvalidArgumentError("terminal weight required")
        self.system, self.weights, self.constraints, self.terminal_set, self.N = system, weights, constraints, terminal_set, N
        A, B = system.A, system.B
        n, m = system.n, system.m
        # x_i = Phi[i] x0 + Gam[i] z
        Phi = np.empty((N + 1, n, n))
        Gam = np.zeros((N + 1, n, N * m))
        Phi[0] = np.eye(n)
        for i in range(N):
            Phi[i + 1] = A @ Phi[i]
            Gam[i + 1] = A @ Gam[i]
            Gam[i + 1][:, i * m : (i + 1) * m] = B
        self.Phi, self.Gam = Phi, Gam
        Qs, Rs, Pt = weights.state, weights.input, weights.terminal
        Hq = sum(Gam[i].T @ Qs @ Gam[i] for i in range(N)) + Gam[N].T @ Pt @ Gam[N]
        self.H = 0.5 * (Hq + Hq.T) + np.kron(np.eye(N), Rs)
        self.G_x0 = sum(Gam[i].T @ Qs @ Phi[i] for i in range(N)) + Gam[N].T @ Pt @ Phi[N]
        self.C_x0 = sum(Phi[i].T @ Qs @ Phi[i] for i in range(N)) + Phi[N].T @ Pt @ Phi[N]
        # inequality rows: stage i uses F x_i + G u_i; terminal uses H_f x_N
        F, G = constraints.F, constraints.G
        d = constraints.d
        rows, cons_x0 = [], []
        for i in range(N):
            Ui = np.zeros((d, N * m))
            Ui[:, i * m : (i + 1) * m] = G
            rows.append(F @ Gam[i] + Ui)
            cons_x0.append(F @ Phi[i])
        rows.append(terminal_set.H @ Gam[N])
        cons_x0.append(terminal_set.H @ Phi[N])
        self.A_in = np.vstack(rows)
        self.A_x0 = np.vstack(cons_x0)

    def rhs(self, margins) -> np.ndarray:
        margins = np.asarray(margins, float)
        if margins.shape[1] < self.N:
            raise InvalidArgumentError("schedule shorter than the horizon")
        stage = (self.constraints.f[:, None] - margins[:, : self.N]).T.reshape(-1)
        return np.concatenate([stage, self.terminal_set.h])

    def solve(self, xbar, margins) -> OcpSolution:
        xbar = np.asarray(xbar, float)
        b = self.rhs(margins) - self.A_x0 @ xbar
        g = self.G_x0 @ xbar
        const = 0.5 * float(xbar @ self.C_x0 @ xbar)
        # rows without decision variables (e.g. state rows at i = 0) are checked directly
        live = np.any(self.A_in != 0, axis=1)
        if np.any(b[~live] < -1e-9):
            return OcpSolution(None, None, np.inf, "infeasible")
        res = solve_qp(self.H, g, self.A_in[live], b[live])
        if res.status != "optimal":
            return OcpSolution(None, None, np.inf, "infeasible")
        z = res.z
        value = 0.5 * float(z @ self.H @ z) + float(g @ z) + const
        u = z.reshape(self.N, self.system.m)
        xs = np.empty((self.N + 1, self.system.n))
        xs[0] = xbar
        for i in range(self.N):
            xs[i + 1] = self.system.A @ xs[i] + self.system.B @ u[i]
        return OcpSolution(u, xs, max(value, 0.0), "optimal")


def build_and_solve_ocp(xbar_k, schedule, system, weights, constraints, terminal_set, N) -> OcpSolution:
    """One-shot convenience around :class:`CondensedOcp`."""
    margins = getattr(schedule, "margins", schedule)
    return CondensedOcp(system, weights, constraints, terminal_set, N).solve(xbar_k, margins)


@dataclass
class ControllerState:
    """Nominal state and ancillary gain; ``xbar`` starts at the initial estimate."""

    xbar: np.ndarray
    K: np.ndarray
    system: LinearSystem

    @classmethod
    def start(cls, xhat0, K, system) -> "ControllerState":
        return cls(np.asarray(xhat0, float).copy(), np.atleast_2d(np.asarray(K, float)), system)


def control_step(ctrl: ControllerState, xhat_k, sol: OcpSolution) -> np.ndarray:
    """``u_k = ubar*_0 + K (xhat_k - xbar_k)``; moves ``xbar`` along the nominal dynamics."""
    if sol is None or not sol.optimal:
        raise ContractViolation("control_step needs an optimal OCP solution")
    u0 = sol.ubar_seq[0]
    u = u0 + ctrl.K @ (np.asarray(xhat_k, float) - ctrl.xbar)
    ctrl.xbar = ctrl.system.A @ ctrl.xbar + ctrl.system.B @ u0
    return u
