"""Ellipsoids and Minkowski sums of linear images of ellipsoids.

An :class:`Ellipsoid` is the set ``{x : (x - c)^T P^{-1} (x - c) <= radius^2}``.
Shape and radius are kept apart so that a precomputed shape can be reused
with a data-dependent radius.

A :class:`SummandList` represents ``M_1 E_1 (+) M_2 E_2 (+) ...`` without ever
forming the sum; everything downstream only needs its support function.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import InvalidArgumentError

_SYM_TOL = 1e-10
_CONTAIN_SLACK = 1e-9


def _as_direction(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(c)):
        raise InvalidArgumentError("support direction must be finite")
    return c


class Ellipsoid:
    """Immutable ellipsoid with a Cholesky factor cached on construction."""

    __slots__ = ("center", "shape", "radius", "_chol")

    def __init__(self, shape, radius: float = 1.0, center=None):
        P = np.array(shape, dtype=float, ndmin=2)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise InvalidArgumentError(f"shape must be square, got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise InvalidArgumentError("shape must be finite")
        scale = max(1.0, float(np.max(np.abs(P))))
        if np.max(np.abs(P - P.T)) > _SYM_TOL * scale:
            raise InvalidArgumentError("shape matrix is not symmetric")
        P = 0.5 * (P + P.T)
        try:
            chol = np.linalg.cholesky(P)
        except np.linalg.LinAlgError as exc:
            raise InvalidArgumentError("shape matrix is not positive definite") from exc
        radius = float(radius)
        if not np.isfinite(radius) or radius < 0:
            raise InvalidArgumentError(f"radius must be finite and >= 0, got {radius}")
        n = P.shape[0]
        if center is None:
            c = np.zeros(n)
        else:
            c = np.array(center, dtype=float).reshape(-1)
            if c.shape != (n,) or not np.all(np.isfinite(c)):
                raise InvalidArgumentError("center must be a finite vector matching the shape")
        for arr in (P, chol, c):
            arr.setflags(write=False)
        self.shape = P
        self.radius = radius
        self.center = c
        self._chol = chol

    @classmethod
    def ball(cls, dim: int, radius: float = 1.0, center=None) -> "Ellipsoid":
        return cls(np.eye(dim), radius, center)

    @classmethod
    def from_matrix(cls, Q) -> "Ellipsoid":
        """The unit-radius set ``{x : x^T Q^{-1} x <= 1}``."""
        return cls(Q, 1.0)

    @property
    def dim(self) -> int:
        return self.shape.shape[0]

    @property
    def chol(self) -> np.ndarray:
        return self._chol

    @property
    def is_centered(self) -> bool:
        return not np.any(self.center)

    @property
    def matrix(self) -> np.ndarray:
        """``radius^2 * P``: the single-matrix description of the set."""
        return self.radius**2 * self.shape

    def factor(self) -> np.ndarray:
        """``G`` with ``E = center + G * unit_ball``."""
        return self.radius * self._chol

    def with_radius(self, radius: float) -> "Ellipsoid":
        return Ellipsoid(self.shape, radius, self.center)

    def scaled(self, factor: float) -> "Ellipsoid":
        return Ellipsoid(self.shape, self.radius * factor, self.center)

    def contains(self, x, tol: float = 1e-9) -> bool | np.ndarray:
        """Membership test; accepts a single point or a stack of points (rows)."""
        x = np.asarray(x, dtype=float)
        d = x - self.center
        y = np.linalg.solve(self._chol, d.T)
        q = np.sum(y * y, axis=0)
        ok = q <= self.radius**2 * (1.0 + tol) + tol
        return bool(ok) if np.ndim(ok) == 0 else ok

    def __repr__(self):
        return f"Ellipsoid(dim={self.dim}, radius={self.radius:g})"


def support(e: Ellipsoid, c) -> float | np.ndarray:
    """Support function ``max_{x in e} c^T x``.

    ``c`` may be one direction (shape ``(n,)``) or a stack of directions
    (shape ``(k, n)``), in which case a length-``k`` array is returned.
    """
    c = _as_direction(c)
    if c.shape[-1] != e.dim:
        raise InvalidArgumentError(f"direction has dim {c.shape[-1]}, ellipsoid {e.dim}")
    proj = c @ e.chol
    return c @ e.center + e.radius * np.linalg.norm(proj, axis=-1)


class SummandList:
    """Minkowski sum ``(+)_j M_j E_j`` of linear images of centered ellipsoids.

    The sum is never formed.  Each term is stored as the factor ``M_j G_j``
    where ``E_j = G_j * unit_ball``; support evaluation is then a sum of
    Euclidean norms, vectorized over terms and directions.
    """

    __slots__ = ("terms", "dim", "_factors")

    def __init__(self, terms: Iterable[tuple[np.ndarray, Ellipsoid]] = (), dim: int | None = None):
        items = []
        for M, E in terms:
            M = np.array(M, dtype=float, ndmin=2)
            if not E.is_centered:
                raise InvalidArgumentError("summands must be origin-centered")
            if M.shape[1] != E.dim:
                raise InvalidArgumentError(f"transform {M.shape} does not act on dim {E.dim}")
            items.append((M, E))
        if items:
            dims = {M.shape[0] for M, _ in items}
            if len(dims) != 1:
                raise InvalidArgumentError("summand transforms have inconsistent output dims")
            dim_found = dims.pop()
            if dim is not None and dim != dim_found:
                raise InvalidArgumentError("dim does not match the summands")
            dim = dim_found
        self.terms = tuple(items)
        self.dim = dim
        self._factors = None

    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms)

    def factors(self) -> list[np.ndarray]:
        if self._factors is None:
            self._factors = [M @ E.factor() for M, E in self.terms]
        return self._factors

    def extended(self, *new_terms: tuple[np.ndarray, Ellipsoid]) -> "SummandList":
        out = SummandList(self.terms + tuple(new_terms), self.dim)
        if self._factors is not None:
            out._factors = self._factors + [np.asarray(M, float) @ E.factor() for M, E in new_terms]
        return out

    def transformed(self, A) -> "SummandList":
        """The image ``A S``: every transform is left-multiplied by ``A``."""
        A = np.asarray(A, dtype=float)
        out = SummandList([(A @ M, E) for M, E in self.terms], A.shape[0] if self.dim is not None else None)
        if self._factors is not None:
            out._factors = [A @ G for G in self._factors]
        return out

    def support(self, c) -> float | np.ndarray:
        return summand_support(self, c)


def summand_support(s: SummandList, c) -> float | np.ndarray:
    """``sum_j support(E_j, M_j^T c)``; the empty list is the set ``{0}``."""
    c = _as_direction(c)
    if len(s) == 0:
        return np.zeros(c.shape[:-1]) if c.ndim > 1 else 0.0
    if c.shape[-1] != s.dim:
        raise InvalidArgumentError(f"direction has dim {c.shape[-1]}, summands act in {s.dim}")
    factors = s.factors()
    widths = {G.shape[1] for G in factors}
    if len(widths) == 1:
        stack = np.stack(factors)  # (J, n, w)
        proj = np.einsum("...n,jnw->...jw", c, stack)
        return np.linalg.norm(proj, axis=-1).sum(axis=-1)
    total = 0.0
    for G in factors:
        total = total + np.linalg.norm(c @ G, axis=-1)
    return total


def min_bounding_box(e: Ellipsoid) -> np.ndarray:
    """Half-widths of the smallest axis-aligned box containing ``e``."""
    if not e.is_centered:
        raise InvalidArgumentError("bounding boxes are only defined for centered ellipsoids here")
    return e.radius * np.sqrt(np.diag(e.shape))


def sample_uniform(e: Ellipsoid, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw points uniformly from the volume of ``e``."""
    n = e.dim
    count = 1 if size is None else size
    if e.radius == 0:
        pts = np.tile(e.center, (count, 1))
    else:
        d = rng.standard_normal((count, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = rng.random(count) ** (1.0 / n)
        pts = e.center + (r[:, None] * d) @ e.factor().T
    return pts[0] if size is None else pts


def sample_boundary(e: Ellipsoid, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw points on the boundary of ``e`` (worst-case stress sampling)."""
    n = e.dim
    count = 1 if size is None else size
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = e.center + d @ e.factor().T
    return pts[0] if size is None else pts


def contained_in(inner: Ellipsoid, outer: Ellipsoid) -> bool:
    """Exact containment test for centered ellipsoids.

    ``inner`` is inside ``outer`` iff the largest generalized eigenvalue of
    ``(r_i^2 P_i, r_o^2 P_o)`` is at most one.
    """
    if not (inner.is_centered and outer.is_centered):
        raise InvalidArgumentError("containment test needs centered ellipsoids")
    if inner.radius == 0:
        return True
    if outer.radius == 0:
        return False
    T = np.linalg.solve(outer.chol, inner.chol)
    lam = np.linalg.norm(T, 2) ** 2 * (inner.radius / outer.radius) ** 2
    return bool(lam <= 1.0 + _CONTAIN_SLACK)


def image_ellipsoid(M, e: Ellipsoid) -> Ellipsoid:
    """Explicit ``M e`` for square invertible ``M``."""
    M = np.asarray(M, dtype=float)
    S = M @ e.shape @ M.T
    return Ellipsoid(0.5 * (S + S.T), e.radius, M @ e.center)

