"""Polytopic comparison tighteners over box over-approximations.

Every set here is a Minkowski sum of linear images of boxes, stored as a
generator matrix ``G`` so that ``{G z : |z|_inf <= 1}`` is the set and the
support function is ``sum |G^T c|``.  Two schemes are provided: separate
bounds on estimation and prediction errors under a Luenberger observer, and a
single bound on the stacked error.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import islice

import numpy as np

from .ellipsoid import Ellipsoid, min_bounding_box
from .errors import DivergenceError, InvalidArgumentError, SynthesisError
from .linsys import LinearSystem, MixedConstraints, spectral_radius
from .tube import TighteningSchedule

_SERIES_TOL = 1e-13


@dataclass(frozen=True)
class BoxSet:
    """``{x : |x_i| <= h_i}``."""

    half_widths: np.ndarray

    def __post_init__(self):
        h = np.array(self.half_widths, dtype=float).reshape(-1)
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise InvalidArgumentError("half widths must be finite and nonnegative")
        object.__setattr__(self, "half_widths", h)

    @classmethod
    def around(cls, e: Ellipsoid) -> "BoxSet":
        return cls(min_bounding_box(e))

    def support(self, c):
        return np.abs(np.asarray(c, float)) @ self.half_widths

    def generators(self) -> np.ndarray:
        return np.diag(self.half_widths)


class BoxSum:
    """Generator-matrix form of a sum of box images; never expanded to vertices."""

    __slots__ = ("G",)

    def __init__(self, G):
        self.G = np.asarray(G, dtype=float)

    @classmethod
    def zero(cls, n: int) -> "BoxSum":
        return cls(np.zeros((n, 0)))

    def __add__(self, other: "BoxSum") -> "BoxSum":
        return BoxSum(np.hstack([self.G, other.G]))

    def image(self, M) -> "BoxSum":
        G = np.asarray(M, float) @ self.G
        keep = np.any(G != 0, axis=0)  # nilpotent maps produce zero columns
        return BoxSum(G[:, keep])

    def support(self, c):
        return np.abs(np.asarray(c, float) @ self.G).sum(axis=-1)


@dataclass(frozen=True)
class BaselineModel:
    system: LinearSystem
    L: np.ndarray
    K: np.ndarray
    W: BoxSet
    V: BoxSet
    constraints: MixedConstraints

    def __post_init__(self):
        object.__setattr__(self, "L", np.atleast_2d(np.asarray(self.L, float)).reshape(self.system.n, -1))
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, float)))

    @property
    def A_L(self):
        return self.system.A + self.L @ self.system.C

    @property
    def A_K(self):
        return self.system.closed_loop(self.K)

    @property
    def w_gen(self) -> BoxSum:
        return BoxSum(self.system.D @ self.W.generators())

    @property
    def v_gen(self) -> BoxSum:
        return BoxSum(self.V.generators())

    def check_stable(self, *which: str) -> None:
        mats = {"A+LC": self.A_L, "A+BK": self.A_K, "composite": self.composite()[0]}
        for name in which:
            if spectral_radius(mats[name]) >= 1:
                raise SynthesisError(f"{name} is not Schur stable")

    def composite(self):
        """Stacked error dynamics ``z = (e, xi)``."""
        n = self.system.n
        LC = self.L @ self.system.C
        At = np.block([[self.A_L, np.zeros((n, n))], [-LC, self.A_K]])
        return At, LC


def observer_error_limit(model: BaselineModel, max_terms: int = 10_000) -> BoxSum:
    """Generators of the limit set of ``E+ = (A + LC) E (+) W (+) L V``.

    The series is truncated once a term's generators fall below 1e-13 in
    norm; for a nilpotent ``A + LC`` it is exact.
    """
    model.check_stable("A+LC")
    step = model.w_gen + model.v_gen.image(model.L)
    parts = []
    M = np.eye(model.system.n)
    for _ in range(max_terms):
        term = step.image(M)
        if term.G.size == 0 or np.abs(term.G).max() < _SERIES_TOL:
            break
        parts.append(term.G)
        M = model.A_L @ M
    else:
        raise DivergenceError("observer error series did not settle")
    return BoxSum(np.hstack(parts) if parts else np.zeros((model.system.n, 0)))


def _rows(model: BaselineModel):
    F = model.constraints.F
    return F, model.constraints.closed_loop_rows(model.K)


def two_set_tightening(k_max: int, model: BaselineModel, E0: BoxSum) -> np.ndarray:
    """``margin[row, k] = h(Xi_k, (F+GK)^T row) + h(E_k, F^T row)`` for ``k = 0..k_max``."""
    return np.column_stack(list(islice(_two_set_steps(model, E0), k_max + 1)))


def single_set_tightening(k_max: int, model: BaselineModel, E0: BoxSum) -> np.ndarray:
    """``margin[row, k] = h(Z_k, (F^T row, (F+GK)^T row))`` with ``Z_0 = E_0 x {0}``."""
    return np.column_stack(list(islice(_single_set_steps(model, E0), k_max + 1)))


def steady_state_margins(kind: str, model: BaselineModel, E0: BoxSum, tolerance: float = 1e-9, max_steps: int = 10_000):
    """Iterate the chosen recursion until no row moves by ``tolerance`` in one step."""
    return _settle(kind, model, E0, tolerance, max_steps)[0]


def _settle(kind, model, E0, tolerance=1e-9, max_steps=10_000):
    if tolerance <= 0:
        raise InvalidArgumentError("tolerance must be positive")
    step_fn = {"two-set": _two_set_steps, "single-set": _single_set_steps}.get(kind)
    if step_fn is None:
        raise InvalidArgumentError(f"unknown baseline {kind!r}")
    prev = None
    for k, m in enumerate(step_fn(model, E0)):
        if prev is not None and np.all(np.abs(m - prev) < tolerance):
            return m, k
        if k >= max_steps:
            break
        prev = m
    raise DivergenceError(f"{kind} margins did not settle within {max_steps} steps")


def _two_set_steps(model, E0):
    model.check_stable("A+LC", "A+BK")
    F, FGK = _rows(model)
    LC = model.L @ model.system.C
    lv = model.v_gen.image(-model.L)
    wl = model.w_gen + model.v_gen.image(model.L)
    E, Xi = E0, BoxSum.zero(model.system.n)
    while True:
        yield Xi.support(FGK) + E.support(F)
        Xi, E = Xi.image(model.A_K) + E.image(-LC) + lv, E.image(model.A_L) + wl


def _single_set_steps(model, E0):
    model.check_stable("composite")
    F, FGK = _rows(model)
    n = model.system.n
    At, _ = model.composite()
    Bt_w = np.vstack([model.system.D @ model.W.generators(), np.zeros((n, model.W.half_widths.size))])
    Bt_v = np.vstack([model.L, -model.L]) @ model.V.generators()
    drive = BoxSum(np.hstack([Bt_w, Bt_v]))
    # Z_k = At^k Z_0 (+) sum_j At^j drive: keep the two parts apart so
    # the sum only grows by one block per step
    dirs = np.hstack([F, FGK])
    Z0 = np.vstack([E0.G, np.zeros((n, E0.G.shape[1]))])
    M = np.eye(2 * n)
    acc = np.zeros(F.shape[0])
    while True:
        yield np.abs(dirs @ M @ Z0).sum(axis=-1) + acc
        acc = acc + np.abs(dirs @ M @ drive.G).sum(axis=-1)
        M = At @ M


class BaselineTighteningSource:
    """Closed-loop margins for a baseline: data independent, indexed by absolute time."""

    def __init__(self, kind: str, model: BaselineModel, E0: BoxSum, N: int, tolerance: float = 1e-9):
        self.kind = kind
        self.N = N
        self.steady, settle = _settle(kind, model, E0, tolerance)
        self._fn = two_set_tightening if kind == "two-set" else single_set_tightening
        self._model, self._E0 = model, E0
        self._table = self._fn(settle + N, model, E0)
        # the sequence need not be monotone, so the terminal bound scans it to convergence
        self.terminal_bound = np.maximum(self.steady, self._table[:, max(N - 1, 0) :].max(axis=1))

    def margins_until(self, t_max: int) -> np.ndarray:
        if self._table.shape[1] <= t_max:
            self._table = self._fn(2 * t_max, self._model, self._E0)
        return self._table[:, : t_max + 1]

    def schedule(self, k: int, delta_sq: float = 0.0) -> TighteningSchedule:
        return TighteningSchedule(self.margins_until(k + self.N)[:, k : k + self.N + 1].copy(), k)

    def advance(self, delta_sq: float = 0.0) -> None:
        pass
