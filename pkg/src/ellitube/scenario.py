"""Scenario files: TOML in, validated :class:`ScenarioConfig` out.

Every table and key is checked against the dataclass fields below; an
unknown key is an error rather than a silent no-op.  Matrices are nested
arrays, a bare number where a square matrix is expected means that multiple
of the identity.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import InvalidArgumentError
from .linsys import LinearSystem, MixedConstraints, QuadrotorParams, quadrotor_system

METHODS = ("proposed", "two-set", "single-set")


@dataclass(frozen=True)
class DisturbanceConfig:
    w_radius: float = 0.1
    v_radius: float = 0.05
    w_shape: Any = None  # defaults to identity
    v_shape: Any = None
    sampling: str = "uniform"  # uniform | boundary | zero


@dataclass(frozen=True)
class InitialConfig:
    x0: Any = None
    xhat0: Any = None
    psi: Any = "steady"  # "steady" (P_inf), a number (times I) or a matrix
    psi_scale: float = 1.0  # multiplies whatever psi resolves to


@dataclass(frozen=True)
class ConstraintConfig:
    F: Any = None
    G: Any = None
    f: Any = None
    state_bounds: Any = ()  # [[index, lo, hi], ...]
    input_bounds: Any = ()


@dataclass(frozen=True)
class CostConfig:
    Q: Any = 1.0
    R: Any = 1.0


@dataclass(frozen=True)
class GainConfig:
    K: Any = None  # None: LQR gain from the cost weights
    L: Any = None  # observer gain, baselines only


@dataclass(frozen=True)
class EstimatorConfig:
    beta: float | None = None  # None: grid search
    rho: float | None = None
    grid_step: float = 0.02


@dataclass(frozen=True)
class TubeConfig:
    alpha_cap: float = 0.05
    steady_tol: float = 1e-6
    switch: bool = True


@dataclass(frozen=True)
class BaselineConfig:
    tolerance: float = 1e-9


@dataclass(frozen=True)
class SystemConfig:
    A: Any = None
    B: Any = None
    C: Any = None
    D: Any = None
    quadrotor: Any = None  # dict of QuadrotorParams fields


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    method: str = "proposed"
    horizon: int = 15
    steps: int = 30
    seed: int = 0
    runs: int = 1
    system: SystemConfig = field(default_factory=SystemConfig)
    disturbance: DisturbanceConfig = field(default_factory=DisturbanceConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    gains: GainConfig = field(default_factory=GainConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    tube: TubeConfig = field(default_factory=TubeConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"method must be one of {METHODS}")
        if self.horizon < 1 or self.steps < 0 or self.runs < 1:
            raise InvalidArgumentError("horizon >= 1, steps >= 0 and runs >= 1 required")
        if not self.initial.psi_scale > 0:
            raise InvalidArgumentError("psi_scale must be positive")
        if self.disturbance.sampling not in ("uniform", "boundary", "zero"):
            raise InvalidArgumentError("sampling must be uniform, boundary or zero")

    # derived objects -----------------------------------------------------

    def build_system(self) -> LinearSystem:
        s = self.system
        if s.quadrotor is not None:
            if s.A is not None:
                raise InvalidArgumentError("give either explicit matrices or quadrotor parameters")
            q = dict(s.quadrotor)
            if "inertia" in q:
                q["inertia"] = tuple(q["inertia"])
            return quadrotor_system(QuadrotorParams(**q))
        if s.A is None or s.B is None or s.C is None:
            raise InvalidArgumentError("system needs A, B and C")
        return LinearSystem(s.A, s.B, s.C, s.D)

    def build_constraints(self, n: int, m: int) -> MixedConstraints:
        c = self.constraints
        if c.F is not None or c.G is not None or c.f is not None:
            if c.F is None or c.G is None or c.f is None:
                raise InvalidArgumentError("F, G and f must be given together")
            return MixedConstraints(c.F, c.G, c.f)
        bounds = [tuple(b) for b in c.state_bounds], [tuple(b) for b in c.input_bounds]
        for group, width in zip(bounds, (n, m)):
            for idx, lo, hi in group:
                if not (0 <= int(idx) < width) or not lo < hi:
                    raise InvalidArgumentError(f"bad bound {idx, lo, hi}")
        cons = MixedConstraints.from_boxes(n, m, [(int(i), lo, hi) for i, lo, hi in bounds[0]], [(int(i), lo, hi) for i, lo, hi in bounds[1]])
        if cons.d == 0:
            raise InvalidArgumentError("no constraints given")
        return cons


def as_square(value, dim: int, name: str) -> np.ndarray:
    if value is None:
        return np.eye(dim)
    if np.isscalar(value):
        return float(value) * np.eye(dim)
    M = np.array(value, dtype=float, ndmin=2)
    if M.shape == (1, dim) or M.shape == (dim,):
        return np.diag(M.reshape(-1))  # diagonal given as a vector
    if M.shape != (dim, dim):
        raise InvalidArgumentError(f"{name} must be {dim}x{dim}, got {M.shape}")
    return M


_SECTIONS = {
    "system": SystemConfig,
    "disturbance": DisturbanceConfig,
    "initial": InitialConfig,
    "constraints": ConstraintConfig,
    "cost": CostConfig,
    "gains": GainConfig,
    "estimator": EstimatorConfig,
    "tube": TubeConfig,
    "baselines": BaselineConfig,
}


def _section(cls, data: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise InvalidArgumentError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> ScenarioConfig:
    data = dict(data)
    top = {f.name for f in fields(ScenarioConfig)} - set(_SECTIONS)
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise InvalidArgumentError(f"[{key}] must be a table")
            kwargs[key] = _section(_SECTIONS[key], value, key)
        elif key in top:
            kwargs[key] = value
        else:
            raise InvalidArgumentError(f"unknown top-level key {key!r}")
    return ScenarioConfig(**kwargs)


def load_scenario(path) -> ScenarioConfig:
    with open(Path(path), "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def with_overrides(config: ScenarioConfig, **changes) -> ScenarioConfig:
    """Copy with top-level fields or ``section__field`` entries replaced."""
    top, nested = {}, {}
    for key, value in changes.items():
        if "__" in key:
            sec, name = key.split("__", 1)
            nested.setdefault(sec, {})[name] = value
        else:
            top[key] = value
    for sec, vals in nested.items():
        top[sec] = replace(getattr(config, sec), **vals)
    return replace(config, **top)
