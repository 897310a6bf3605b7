"""Dense convex QP by a Mehrotra predictor-corrector interior point method.

Solves ``min 1/2 z^T H z + g^T z  s.t.  A z <= b`` with ``H`` positive
definite.  Problems here are small (tens of variables), so every Newton step
is a dense Cholesky solve on the reduced normal matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from .errors import SolverError


@dataclass(frozen=True)
class QpResult:
    z: np.ndarray | None
    status: str  # "optimal" | "infeasible"
    multipliers: np.ndarray | None = None
    iterations: int = 0
    residuals: dict | None = None


def kkt_residuals(H, g, A, b, z, lam) -> dict:
    """Relative stationarity, primal infeasibility and complementarity."""
    scale = 1.0 + max(np.abs(g).max(initial=0.0), np.abs(H).max(initial=0.0))
    stat = H @ z + g + A.T @ lam
    viol = np.maximum(A @ z - b, 0.0)
    comp = np.abs(lam * (b - A @ z))
    return {
        "stationarity": float(np.abs(stat).max(initial=0.0) / scale),
        "primal": float(viol.max(initial=0.0) / (1.0 + np.abs(b).max(initial=0.0))),
        "complementarity": float(comp.max(initial=0.0) / scale),
        "dual_sign": float(max(0.0, -lam.min(initial=0.0))),
    }


def is_feasible(A, b) -> bool:
    """Phase-one check with an LP: is ``{z : A z <= b}`` nonempty."""
    if A.shape[0] == 0:
        return True
    res = linprog(np.zeros(A.shape[1]), A_ub=A, b_ub=b, bounds=[(None, None)] * A.shape[1], method="highs")
    return res.status == 0


def solve_qp(H, g, A, b, tol: float = 1e-10, max_iter: int = 100, accept: float = 1e-8) -> QpResult:
    H = np.asarray(H, float)
    g = np.asarray(g, float)
    A = np.asarray(A, float).reshape(-1, g.size)
    b = np.asarray(b, float).reshape(-1)
    n, m = g.size, b.size
    if m == 0:
        z = -scipy.linalg.cho_solve(scipy.linalg.cho_factor(H), g)
        return QpResult(z, "optimal", np.zeros(0), 0, kkt_residuals(H, g, A, b, z, np.zeros(0)))

    # start from the unconstrained minimizer with slacks pushed inside
    z = -scipy.linalg.cho_solve(scipy.linalg.cho_factor(H), g)
    s = np.maximum(b - A @ z, 1.0)
    lam = np.ones(m)
    nrm_g = 1.0 + max(np.abs(g).max(), np.abs(H).max())
    nrm_b = 1.0 + np.abs(b).max()

    for it in range(1, max_iter + 1):
        r_d = H @ z + g + A.T @ lam
        r_p = A @ z + s - b
        mu = s @ lam / m
        if np.abs(r_d).max() <= tol * nrm_g and np.abs(r_p).max() <= tol * nrm_b and np.max(s * lam) <= tol * nrm_g:
            z, lam = _polish(H, g, A, b, z, s, lam)
            return QpResult(z, "optimal", lam, it, kkt_residuals(H, g, A, b, z, lam))
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(lam))) or lam.max() > 1e14:
            break

        w = lam / s
        M = H + A.T @ (w[:, None] * A)
        try:
            fac = scipy.linalg.cho_factor(M)
        except np.linalg.LinAlgError:
            break

        def newton(r_c):
            # r_c is the complementarity residual s * lam - target
            rhs = -(r_d + A.T @ ((lam * r_p - r_c) / s))
            dz = scipy.linalg.cho_solve(fac, rhs)
            ds = -r_p - A @ dz
            dl = -(r_c + lam * ds) / s
            return dz, ds, dl

        # predictor
        dz, ds, dl = newton(s * lam)
        a_aff = min(_step(s, ds), _step(lam, dl))
        mu_aff = (s + a_aff * ds) @ (lam + a_aff * dl) / m
        sigma = (mu_aff / mu) ** 3
        # corrector
        dz, ds, dl = newton(s * lam + ds * dl - sigma * mu)
        alpha = 0.995 * min(_step(s, ds), _step(lam, dl))
        alpha = min(alpha, 1.0)
        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dl

    res = kkt_residuals(H, g, A, b, z, lam)
    if all(np.isfinite(v) and v <= accept for v in res.values()):
        z, lam = _polish(H, g, A, b, z, s, lam)  # stalled at rounding level
        return QpResult(z, "optimal", lam, it, kkt_residuals(H, g, A, b, z, lam))
    if not is_feasible(A, b):
        return QpResult(None, "infeasible", None, it)
    raise SolverError("interior point method did not converge", res)


def _polish(H, g, A, b, z, s, lam):
    """Solve the equality KKT system on the guessed active set.

    Interior point iterates stop a little inside the boundary; the active-set
    solve lands on it to rounding accuracy.  The polished point is kept only
    if it is primal feasible with nonnegative multipliers.
    """
    act = np.flatnonzero(lam > s)
    n, k = z.size, act.size
    Aa = A[act]
    kkt = np.block([[H, Aa.T], [Aa, np.zeros((k, k))]])
    try:
        sol = np.linalg.solve(kkt, np.concatenate([-g, b[act]]))
    except np.linalg.LinAlgError:
        return z, lam
    z_new, lam_act = sol[:n], sol[n:]
    tol = 1e-12 * (1.0 + np.abs(b).max())
    if not (np.all(np.isfinite(sol)) and np.all(lam_act >= 0) and np.all(A @ z_new <= b + tol)):
        return z, lam
    lam_new = np.zeros_like(lam)
    lam_new[act] = lam_act
    return z_new, lam_new


def _step(v, dv) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))
