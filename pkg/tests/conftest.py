from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ellitube.linsys import LinearSystem, MixedConstraints
from ellitube.scenario import load_scenario

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DI_K = np.array([[-0.6136, -0.9962]])
DI_L = np.array([[-1.0], [-1.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def di_system():
    return LinearSystem([[1.0, 1.0], [0.0, 1.0]], [[1.0], [1.0]], [[1.0, 1.0]])


@pytest.fixture
def di_constraints():
    return MixedConstraints.from_boxes(2, 1, [(0, -50.0, 3.0), (1, -50.0, 3.0)], [(0, -3.0, 3.0)])


@pytest.fixture(scope="session")
def di_config():
    return load_scenario(SCENARIOS / "double_integrator.toml")


@pytest.fixture(scope="session")
def table1_config():
    return load_scenario(SCENARIOS / "table1.toml")


@pytest.fixture(scope="session")
def quad_config():
    return load_scenario(SCENARIOS / "quadrotor.toml")


def random_spd(rng, n, cond=50.0):
    Qm, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.exp(rng.uniform(0, np.log(cond), n))
    return Qm @ np.diag(w) @ Qm.T


# acceptance criteria report: one line per criterion at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
