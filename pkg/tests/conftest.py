import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("vims", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("vims")

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    from vims.geometry import exp_rotmat
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_rotmat(axis * rng.uniform(0.0, max_angle))


def fd_jacobian(f, x0: np.ndarray, retract, dim: int, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``f(retract(x0, dx))`` in each tangent direction."""
    cols = []
    for k in range(dim):
        d = np.zeros(dim)
        d[k] = h
        cols.append((np.asarray(f(retract(x0, d))) - np.asarray(f(retract(x0, -d)))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(J: np.ndarray, J_fd: np.ndarray) -> float:
    return float(np.linalg.norm(J - J_fd) / max(np.linalg.norm(J_fd), 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
